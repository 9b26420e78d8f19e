"""YAML scenario configuration.

One file describes a complete closed-loop experiment: vessel parameters,
controller parameters, observer noise, the scenario (initial state,
current, references, mode, duration) and plant options.  Matrices are
row-major nested lists; angles are radians except the bow-thruster tilt
`alpha_deg`, which is degrees (a tilt of 15 rad would be nonphysical).

Unspecified keys fall back to the case-study defaults, so a minimal file
only needs the `scenario` section.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import yaml

from .dynamics import USV1, USV2, PlantFidelity, VesselParams
from .nmpc import MpcConfig, ReferencePose
from .observer import SensorNoise
from .simulate import DEFAULT_DRAG, ControllerMode, Scenario


class ConfigError(ValueError):
    """Malformed or inconsistent configuration file."""


@dataclass(frozen=True)
class RunConfig:
    """Everything needed for one closed-loop run."""

    scenario: Scenario
    mpc: MpcConfig
    params1: VesselParams
    params2: VesselParams
    references: dict[str, ReferencePose]
    use_reference: str
    observer: dict

    def with_overrides(
        self,
        seed: int | None = None,
        mode: str | None = None,
        reference: str | None = None,
    ) -> "RunConfig":
        scn = self.scenario
        use_ref = self.use_reference
        if seed is not None:
            scn = _replace_scenario(scn, seed=seed)
        if mode is not None:
            scn = _replace_scenario(scn, mode=_parse_mode(mode))
        if reference is not None:
            if reference not in self.references:
                raise ConfigError(f"unknown reference id {reference!r}")
            use_ref = reference
            scn = _replace_scenario(scn, reference=self.references[reference])
        return RunConfig(
            scenario=scn,
            mpc=self.mpc,
            params1=self.params1,
            params2=self.params2,
            references=self.references,
            use_reference=use_ref,
            observer=self.observer,
        )


def _replace_scenario(scn: Scenario, **kw) -> Scenario:
    fields = dict(
        name=scn.name,
        q_init=scn.q_init,
        current_speed=scn.current_speed,
        current_heading=scn.current_heading,
        reference=scn.reference,
        mode=scn.mode,
        steps=scn.steps,
        seed=scn.seed,
        drag=scn.drag,
        noise=scn.noise,
        plant_fidelity=scn.plant_fidelity,
        plant_substeps=scn.plant_substeps,
    )
    fields.update(kw)
    return Scenario(**fields)


def _parse_mode(text: str) -> ControllerMode:
    try:
        return ControllerMode(text)
    except ValueError:
        valid = ", ".join(m.value for m in ControllerMode)
        raise ConfigError(f"unknown controller mode {text!r} (expected {valid})")


def _matrix(node, key: str) -> np.ndarray:
    try:
        m = np.array(node, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: not a numeric matrix") from exc
    if m.shape != (3, 3):
        raise ConfigError(f"{key}: expected a 3x3 row-major matrix")
    return m


def _vessel(node: dict, key: str, default: VesselParams) -> VesselParams:
    if node is None:
        return default
    try:
        alpha = node.get("alpha_deg")
        return VesselParams(
            M=_matrix(node["M"], f"{key}.M") if "M" in node else default.M,
            D_L=_matrix(node["D_L"], f"{key}.D_L") if "D_L" in node else default.D_L,
            d=float(node.get("d", default.d)),
            w=float(node.get("w", default.w)),
            alpha=math.radians(float(alpha)) if alpha is not None else default.alpha,
            v_max=float(node.get("v_max", default.v_max)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def _mpc(node: dict | None, d_min: float) -> MpcConfig:
    node = node or {}
    kwargs = {}
    for key in (
        "N",
        "dt",
        "d_min",
        "v_max_1",
        "v_max_2",
        "slack_weight",
        "slack_weight_l1",
        "max_iterations",
        "kkt_tol",
        "feas_tol",
        "qp_tol",
        "qp_max_iter",
        "time_budget_s",
    ):
        if key in node:
            kwargs[key] = node[key]
    kwargs.setdefault("d_min", d_min)
    for key in ("Q1", "Q2", "Qu", "F_max", "F_min", "dF_max", "dF_min"):
        if key in node:
            kwargs[key] = np.array(node[key], dtype=float)
    try:
        return MpcConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"mpc: {exc}") from exc


def _pose(node, key: str) -> np.ndarray:
    arr = np.array(node, dtype=float)
    if arr.shape != (3,):
        raise ConfigError(f"{key}: expected [x, y, psi]")
    return arr


def _reference(node: dict, key: str) -> ReferencePose:
    if "usv1" in node and "usv2" in node:
        return ReferencePose(
            np.concatenate(
                [_pose(node["usv1"], f"{key}.usv1"), _pose(node["usv2"], f"{key}.usv2")]
            )
        )
    if "center" in node and "heading" in node:
        return ReferencePose.docking(
            np.array(node["center"], dtype=float),
            float(node["heading"]),
            float(node["d_min"]),
        )
    raise ConfigError(f"{key}: give usv1/usv2 poses or center/heading/d_min")


def load_config(path) -> RunConfig:
    """Parse and validate a scenario YAML file."""
    with open(path) as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}") from exc
    if not isinstance(doc, dict) or "scenario" not in doc:
        raise ConfigError("config must be a mapping with a 'scenario' section")

    params1 = _vessel((doc.get("vessels") or {}).get("usv1"), "vessels.usv1", USV1)
    params2 = _vessel((doc.get("vessels") or {}).get("usv2"), "vessels.usv2", USV2)
    d_min_default = 0.5 * (params1.d + params2.d)
    mpc = _mpc(doc.get("mpc"), d_min_default)

    scn = doc["scenario"]
    try:
        name = str(scn.get("name", "scenario"))
        init = scn["initial"]
        q_init = np.concatenate(
            [
                _pose(init["usv1"]["eta"], "initial.usv1.eta"),
                np.array(init["usv1"].get("nu", [0.0, 0.0, 0.0]), dtype=float),
                _pose(init["usv2"]["eta"], "initial.usv2.eta"),
                np.array(init["usv2"].get("nu", [0.0, 0.0, 0.0]), dtype=float),
            ]
        )
        current = scn.get("current", {"speed": 0.0, "heading": 0.0})
        refs_node = scn["reference"]
    except KeyError as exc:
        raise ConfigError(f"scenario: missing key {exc}") from exc

    refs = {}
    for rid, rnode in refs_node.items():
        node = dict(rnode)
        node.setdefault("d_min", mpc.d_min)
        refs[str(rid)] = _reference(node, f"reference.{rid}")
    use_ref = str(scn.get("use_reference", next(iter(refs))))
    if use_ref not in refs:
        raise ConfigError(f"use_reference {use_ref!r} not among {sorted(refs)}")

    noise_node = scn.get("measurement_noise")
    noise = None
    if noise_node:
        noise = SensorNoise(
            pos=float(noise_node.get("pos", 0.0)),
            heading=math.radians(float(noise_node.get("heading_deg", 0.0))),
            vel=float(noise_node.get("vel", 0.0)),
            yaw_rate=math.radians(float(noise_node.get("yaw_rate_deg", 0.0))),
        )
        if all(v == 0.0 for v in (noise.pos, noise.heading, noise.vel, noise.yaw_rate)):
            noise = None

    plant = scn.get("plant", {}) or {}
    fidelity = (
        PlantFidelity.WITH_CORIOLIS
        if plant.get("fidelity", "linear") == "coriolis"
        else PlantFidelity.LINEAR_LOW_SPEED
    )

    drag_node = scn.get("drag")
    drag = DEFAULT_DRAG if drag_node is None else (float(drag_node[0]), float(drag_node[1]))

    try:
        scenario = Scenario(
            name=name,
            q_init=q_init,
            current_speed=float(current.get("speed", 0.0)),
            current_heading=float(current.get("heading", 0.0)),
            reference=refs[use_ref],
            mode=_parse_mode(str(scn.get("mode", "coop"))),
            steps=int(scn.get("duration_steps", 200)),
            seed=int(scn.get("seed", 0)),
            drag=drag,
            noise=noise,
            plant_fidelity=fidelity,
            plant_substeps=int(plant.get("substeps", 1)),
        )
    except ValueError as exc:
        raise ConfigError(f"scenario: {exc}") from exc

    return RunConfig(
        scenario=scenario,
        mpc=mpc,
        params1=params1,
        params2=params2,
        references=refs,
        use_reference=use_ref,
        observer=dict(doc.get("observer") or {}),
    )
