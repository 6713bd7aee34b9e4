"""Experiment configuration schema (YAML) and builders for runtime objects."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import stl
from .controllers import PidController, PidGains, SwitchedController, SwitchedGains
from .coverage import SettingSpace, _cells
from .loop import CombinedTeacher, LoopConfig, NominalTeacher, Problem
from .nn import History, NetSpec
from .plant import make_plant
from .pstl import build_phi_template


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PlantCfg(Strict):
    name: Literal["water_tank", "linear2d", "first_order"] = "water_tank"
    x0_box: Optional[tuple[list[float], list[float]]] = None
    ref_range: Optional[tuple[list[float], list[float]]] = None
    x0_from_ref: bool = False


class SimulationCfg(Strict):
    T_sim: float = Field(10.0, gt=0)
    h: float = Field(0.1, gt=0)
    substeps: int = Field(10, ge=1)
    pieces: int = Field(2, ge=1)

    @model_validator(mode="after")
    def _divides(self):
        n = round(self.T_sim / self.h)
        if abs(n * self.h - self.T_sim) > 1e-9:
            raise ValueError("h must divide T_sim")
        return self


class PidCfg(Strict):
    kind: Literal["pid"] = "pid"
    kp: float
    ki: float = 0.0
    kd: float = 0.0
    u_min: float = -1e9
    u_max: float = 1e9


class SwitchedCfg(Strict):
    kind: Literal["switched"] = "switched"
    pid: PidCfg
    kp_p: float
    dead_band: float = 0.005
    p_band: float = 0.1


ControllerCfg = Union[PidCfg, SwitchedCfg]


class PropertyCfg(Strict):
    name: str
    template: Optional[Literal["matching", "stabilization", "settling", "overshoot"]] = None
    params: dict[str, float] = Field(default_factory=dict)
    text: Optional[str] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.template is None) == (self.text is None):
            raise ValueError("give exactly one of 'template' or 'text'")
        return self


class CombinedCfg(Strict):
    controllers: list[ControllerCfg] = Field(min_length=1)
    segment: float = Field(gt=0)


class NetCfg(Strict):
    hidden: list[tuple[int, Literal["tanh", "relu"]]] = Field(default_factory=lambda: [(30, "tanh"), (30, "tanh")])
    history: dict[str, int] = Field(default_factory=dict)
    input_mode: Literal["separate", "error"] = "separate"

    @field_validator("history")
    @classmethod
    def _hist_keys(cls, v):
        bad = set(v) - {"n_r", "n_y", "n_u", "n_nu"}
        if bad:
            raise ValueError(f"unknown history keys {sorted(bad)}")
        return v


class TrainingCfg(Strict):
    epochs_initial: int = Field(100, ge=0)
    epochs_retrain: int = Field(100, ge=0)
    batch: int = 64
    lr: float = Field(1e-3, gt=0)
    val_fraction: float = Field(0.1, ge=0, lt=1)
    warm_start: bool = True


class GridCfg(Strict):
    eps: float = Field(0.25, gt=0)


class LoopCfg(Strict):
    max_iterations: int = Field(5, ge=1)
    falsify_budget: int = Field(300, ge=1)
    confirm_budget: int = Field(200, ge=1)
    cluster: bool = True
    k_rho: int = Field(3, ge=1)
    delta: Optional[float] = None
    example_count: Optional[int] = None
    exclusion_radius: float = Field(0.05, ge=0)
    init_fraction: float = Field(0.5, gt=0, le=1)
    k_best: int = Field(3, ge=1)
    simplex_scale: float = Field(0.1, gt=0)
    coverage_factor: int = Field(2, ge=1)


class PstlCfg(Strict):
    ranges: dict[str, tuple[float, float]] = Field(default_factory=lambda: {
        "s_ov": (0.0, 20.0), "s_st": (0.0, 20.0), "tau_tr": (0.1, 10.0), "tau_st": (0.1, 10.0)})
    grid: list[int] = Field(default_factory=lambda: [5, 5, 5, 5])
    n_settings: int = Field(20, ge=1)
    output: Literal["y", "e"] = "y"
    retrain_if: Literal["sigma_above", "sigma_below"] = "sigma_above"
    sigma_threshold: float = 1.0

    @field_validator("ranges")
    @classmethod
    def _names(cls, v):
        want = {"s_ov", "s_st", "tau_tr", "tau_st"}
        if set(v) != want:
            raise ValueError(f"ranges must name exactly {sorted(want)}")
        return v


class Prop2Cfg(Strict):
    plant: Literal["water_tank", "linear2d", "first_order"] = "first_order"
    eps: float = Field(0.1, ge=0)
    T_h: float = Field(2.0, gt=0)
    trials: int = Field(100, ge=1)
    u_range: tuple[float, float] = (-1.0, 1.0)


class ExperimentConfig(Strict):
    seed: int
    output_dir: str = "out"
    plant: PlantCfg = PlantCfg()
    simulation: SimulationCfg = SimulationCfg()
    nominal: ControllerCfg
    combined: Optional[CombinedCfg] = None
    properties: list[PropertyCfg] = Field(min_length=1)
    net: NetCfg = NetCfg()
    training: TrainingCfg = TrainingCfg()
    grid: GridCfg = GridCfg()
    loop: LoopCfg = LoopCfg()
    pstl: PstlCfg = PstlCfg()
    prop2: Prop2Cfg = Prop2Cfg()

    @model_validator(mode="after")
    def _grid_integral(self):
        plant = make_plant(self.plant.name)
        lo, hi = (plant.ref_range if self.plant.ref_range is None else self.plant.ref_range)
        for a, b in zip(lo, hi):
            _cells(float(a), float(b), self.grid.eps)
        if self.plant.x0_box is not None and not self.plant.x0_from_ref:
            for a, b in zip(*self.plant.x0_box):
                if b > a:
                    _cells(float(a), float(b), self.grid.eps)
        return self


def load_config(path: str | Path) -> ExperimentConfig:
    data = yaml.safe_load(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError("configuration must be a mapping")
    return ExperimentConfig.model_validate(data)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False))


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def build_controller(c: ControllerCfg, h: float):
    if isinstance(c, PidCfg):
        return PidController(PidGains(c.kp, c.ki, c.kd, c.u_min, c.u_max, h))
    pid = PidGains(c.pid.kp, c.pid.ki, c.pid.kd, c.pid.u_min, c.pid.u_max, h)
    return SwitchedController(SwitchedGains(pid, c.kp_p, c.dead_band, c.p_band))


def build_properties(cfg: ExperimentConfig) -> list[stl.Formula]:
    out = []
    for p in cfg.properties:
        if p.text is not None:
            out.append(stl.parse_formula(p.text))
        else:
            params = dict(p.params)
            params.setdefault("T_sim", cfg.simulation.T_sim)
            out.append(stl.build_property(p.template, params))
    return out


def build_plant(cfg: ExperimentConfig):
    plant = make_plant(cfg.plant.name)
    if cfg.plant.ref_range is not None:
        plant = plant.with_ref_range(*cfg.plant.ref_range)
    if cfg.plant.x0_box is not None:
        plant = plant.with_x0_box(*cfg.plant.x0_box)
    return plant


def build_space(cfg: ExperimentConfig, plant) -> SettingSpace:
    return SettingSpace.for_plant(plant, cfg.simulation.pieces, cfg.simulation.T_sim,
                                  x0_from_ref=cfg.plant.x0_from_ref)


def build_spec(cfg: ExperimentConfig, plant) -> NetSpec:
    return NetSpec(tuple(cfg.net.hidden), History(**cfg.net.history), plant.d_r, plant.m, plant.p,
                   0, cfg.net.input_mode)


def build_problem(cfg: ExperimentConfig) -> Problem:
    plant = build_plant(cfg)
    props = build_properties(cfg)
    phi = stl.conjunction(*props)
    sim = cfg.simulation
    if cfg.combined is not None:
        ctrls = [build_controller(c, sim.h) for c in cfg.combined.controllers]
        teacher = CombinedTeacher(plant, ctrls, props, cfg.combined.segment, sim.h, sim.substeps)
    else:
        teacher = NominalTeacher(plant, build_controller(cfg.nominal, sim.h), phi, sim.h, sim.substeps)
    return Problem(plant, teacher, phi, build_space(cfg, plant), build_spec(cfg, plant), sim.h, sim.substeps)


def build_loop_config(cfg: ExperimentConfig) -> LoopConfig:
    t = cfg.training
    return LoopConfig(eps=cfg.grid.eps, epochs_initial=t.epochs_initial, epochs_retrain=t.epochs_retrain,
                      batch=t.batch, lr=t.lr, val_fraction=t.val_fraction, warm_start=t.warm_start,
                      seed=cfg.seed, **cfg.loop.model_dump())


def build_pstl(cfg: ExperimentConfig):
    r = cfg.pstl.ranges
    return build_phi_template(r["s_ov"], r["s_st"], r["tau_tr"], r["tau_st"], output=cfg.pstl.output)
