"""Core data types: devices, clouds, links, plans, model state, strategy config.

Scenarios are read from a YAML file (``schema_version: 1``) and validated into
immutable dataclasses. ``scenario_to_dict`` is the inverse of
``validate_scenario`` so a scenario survives a load/dump round trip unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

import numpy as np
import yaml

from .errors import ScenarioError

SCHEMA_VERSION = 1
POWER_COLUMNS = ("in", "tn")
STRATEGY_KINDS = ("baseline_asgd", "asgd_ga", "ama", "sma")
ACCUMULATION_MODES = ("sum", "mean")
MODEL_KINDS = ("logistic_regression", "mlp")

# Reference device rows: (device id, kind, used cores, TFLOPS, TN, iteration time s, IN).
# The first row is the normalization baseline.
DEVICE_TABLE = (
    ("IceLake", "cpu", 2, 0.096, 1.000, 3.697, 1.000),
    ("Cascade", "cpu", 2, 0.090, 0.938, 5.549, 0.666),
    ("Sky", "cpu", 2, 0.112, 1.167, 3.800, 0.973),
    ("T4", "gpu", 2560, 5.554, 57.854, 0.062, 59.629),
    ("V100", "gpu", 5120, 13.345, 139.010, 0.024, 154.042),
)
BASELINE_DEVICE = "IceLake"

# stored tn / in_norm values carry 3 decimals, so recomputation is checked loosely
NORMALIZATION_RTOL = 1e-3
DEFAULT_PRICE_PER_TN_HOUR = 0.05


@dataclass(frozen=True)
class DevicePower:
    device_id: str
    kind: str
    tflops: float
    tn: float
    iter_time_s: float
    in_norm: float
    price_per_unit_hour: float

    def power(self, column: str = "in") -> float:
        """Per-unit computing power used by the load-power formula."""
        if column == "in":
            return self.in_norm
        if column == "tn":
            return self.tn
        raise ValueError(f"unknown power column {column!r}")


@dataclass(frozen=True)
class Jitter:
    """Log-normal multiplier on transfer time: ``exp(N(0, sigma))``."""

    dist: str = "lognormal"
    sigma: float = 0.25


@dataclass(frozen=True)
class LinkModel:
    bandwidth_bps: float
    latency_s: float = 0.0
    jitter: Jitter | None = None

    def __post_init__(self):
        if not self.bandwidth_bps > 0:
            raise ValueError("bandwidth_bps must be positive")
        if self.latency_s < 0:
            raise ValueError("latency_s must be non-negative")


@dataclass(frozen=True)
class CloudSpec:
    cloud_id: str
    devices: tuple[tuple[DevicePower, int], ...]
    dataset_size: int
    lan_model: LinkModel
    wan_endpoint: str = ""

    @property
    def total_units(self) -> int:
        return sum(units for _, units in self.devices)

    def full_allocation(self) -> tuple[tuple[DevicePower, int], ...]:
        return tuple((d, n) for d, n in self.devices)


@dataclass(frozen=True)
class ResourcingPlan:
    """Per-cloud unit allocation plus the load power it yields."""

    allocations: Mapping[str, tuple[tuple[str, int], ...]]
    per_cloud_lp: Mapping[str, float]
    power_column: str = "in"
    straggler: str | None = None

    def units(self, cloud_id: str, device_id: str | None = None) -> int:
        return sum(n for d, n in self.allocations[cloud_id] if device_id in (None, d))

    def describe(self) -> str:
        parts = []
        for cid, alloc in self.allocations.items():
            body = " + ".join(f"{d}×{n}" for d, n in alloc if n > 0) or "none"
            parts.append(f"{cid}: {body}")
        return ", ".join(parts)

    def to_dict(self) -> dict:
        return {
            "power_column": self.power_column,
            "straggler": self.straggler,
            "allocations": {c: [[d, n] for d, n in a] for c, a in self.allocations.items()},
            "per_cloud_lp": dict(self.per_cloud_lp),
        }


@dataclass(frozen=True)
class Architecture:
    """Dense binary classifier: ``hidden == ()`` is logistic regression."""

    input_dim: int
    hidden: tuple[int, ...] = ()

    @property
    def layer_sizes(self) -> list[tuple[int, int]]:
        sizes = [self.input_dim, *self.hidden, 1]
        return list(zip(sizes[:-1], sizes[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_sizes)


@dataclass(frozen=True, eq=False)
class ModelState:
    arch: Architecture
    params: np.ndarray
    version: int = 0
    accum_grad: np.ndarray | None = None
    accum_count: int = 0

    def __post_init__(self):
        params = np.array(self.params, dtype=np.float64)
        object.__setattr__(self, "params", params)
        if params.shape != (self.arch.n_params,):
            raise ValueError(f"expected {self.arch.n_params} params, got shape {params.shape}")
        accum = np.zeros_like(params) if self.accum_grad is None else np.array(self.accum_grad, dtype=np.float64)
        if accum.shape != params.shape:
            raise ValueError("accum_grad length must equal params length")
        object.__setattr__(self, "accum_grad", accum)
        if not (np.all(np.isfinite(params)) and np.all(np.isfinite(accum))):
            raise ValueError("model state contains non-finite values")
        # zero-valued gradients legitimately raise the count, so only this direction holds
        if self.accum_count == 0 and np.any(accum):
            raise ValueError("accum_count is 0 but accum_grad is non-zero")

    @classmethod
    def initial(cls, arch: Architecture, rng: np.random.Generator | None = None) -> ModelState:
        if rng is None or not arch.hidden:
            # logistic regression is convex, so start from zero
            return cls(arch, np.zeros(arch.n_params))
        params = []
        for fan_in, fan_out in arch.layer_sizes:
            w = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))
            params.extend([w.ravel(), np.zeros(fan_out)])
        return cls(arch, np.concatenate(params))

    def evolve(self, **changes) -> ModelState:
        return replace(self, **changes)


@dataclass(frozen=True)
class SyncStrategyConfig:
    kind: str = "asgd_ga"
    sync_frequency: int = 4
    accumulation_mode: str = "sum"
    topology: Mapping[str, str] = field(default_factory=dict)
    lr_sync: float | None = None
    scale_by_window: bool = False

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.accumulation_mode not in ACCUMULATION_MODES:
            raise ValueError(f"unknown accumulation_mode {self.accumulation_mode!r}")
        if int(self.sync_frequency) != self.sync_frequency or self.sync_frequency < 1:
            raise ValueError("sync_frequency must be an integer >= 1")
        if self.kind == "baseline_asgd" and self.sync_frequency != 1:
            raise ValueError("baseline_asgd synchronizes every iteration (sync_frequency=1)")
        for sender, receiver in self.topology.items():
            if sender == receiver:
                raise ValueError(f"self-loop sender {sender!r}")

    @property
    def sends_gradients(self) -> bool:
        return self.kind in ("baseline_asgd", "asgd_ga")

    @classmethod
    def baseline(cls, topology: Mapping[str, str] | None = None) -> SyncStrategyConfig:
        return cls(kind="baseline_asgd", sync_frequency=1, topology=dict(topology or {}))


@dataclass(frozen=True)
class TrainConfig:
    model_kind: str = "logistic_regression"
    hidden_sizes: tuple[int, ...] = ()
    learning_rate: float = 0.5
    batch_size: int = 50
    epochs: int = 10
    seed: int = 0
    iters_per_epoch: int | None = None

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model_kind!r}")
        if self.model_kind == "mlp" and not (1 <= len(self.hidden_sizes) <= 2):
            raise ValueError("mlp takes one or two hidden layers")
        if self.model_kind == "logistic_regression" and self.hidden_sizes:
            raise ValueError("logistic_regression has no hidden layers")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.iters_per_epoch is not None and self.iters_per_epoch < 1:
            raise ValueError("iters_per_epoch must be >= 1")

    def architecture(self, input_dim: int) -> Architecture:
        return Architecture(input_dim, tuple(self.hidden_sizes))


@dataclass(frozen=True)
class DataConfig:
    kind: str = "blobs"
    dims: int = 10
    margin: float = 0.5
    spread: float = 1.0
    path: str | None = None
    # "split": clouds hold disjoint shares; "replicate": every cloud holds an identical copy
    mode: str = "split"


@dataclass(frozen=True)
class TimingConfig:
    """Compute-time model: the reference allocation processes ``reference_dataset``
    samples per iteration in ``reference_iter_time_s``."""

    reference_iter_time_s: float = 3.697
    reference_units: int = 2
    reference_dataset: int = 1000
    startup_s: float = 0.0
    load_time_s: float | None = None


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    power_column: str
    devices: tuple[DevicePower, ...]
    baseline_device: str
    clouds: tuple[CloudSpec, ...]
    wan: LinkModel
    strategy: SyncStrategyConfig
    trainer: TrainConfig
    data: DataConfig
    timing: TimingConfig
    price_per_tn_hour: float = DEFAULT_PRICE_PER_TN_HOUR
    full_load_power: Mapping[str, float] = field(default_factory=dict, compare=False)
    schema_version: int = SCHEMA_VERSION

    def cloud(self, cloud_id: str) -> CloudSpec:
        for c in self.clouds:
            if c.cloud_id == cloud_id:
                return c
        raise KeyError(cloud_id)

    def device(self, device_id: str) -> DevicePower:
        for d in self.devices:
            if d.device_id == device_id:
                return d
        raise KeyError(device_id)

    @property
    def cloud_ids(self) -> list[str]:
        return [c.cloud_id for c in self.clouds]

    def with_overrides(self, **changes) -> Scenario:
        """Replace top-level fields and re-run validation."""
        return validate_scenario(scenario_to_dict(replace(self, **changes)))


# -- parsing ---------------------------------------------------------------


def reference_devices(price_per_tn_hour: float = DEFAULT_PRICE_PER_TN_HOUR) -> list[dict]:
    """The five reference device rows in scenario-file form."""
    return [
        {
            "id": name,
            "kind": kind,
            "tflops": tflops,
            "tn": tn,
            "iter_time_s": it,
            "in_norm": in_norm,
            "price_per_unit_hour": round(tn * price_per_tn_hour, 12),
        }
        for name, kind, _cores, tflops, tn, it, in_norm in DEVICE_TABLE
    ]


def _close(stored: float, computed: float, rtol: float) -> bool:
    return abs(stored - computed) <= rtol * abs(computed)


def _link(raw: Any, where: str, errors: list[str]) -> LinkModel | None:
    if not isinstance(raw, Mapping):
        errors.append(f"{where}: expected a mapping with bandwidth_bps/latency_s")
        return None
    bw = float(raw.get("bandwidth_bps", 0))
    lat = float(raw.get("latency_s", 0.0))
    if not bw > 0:
        errors.append(f"{where}: non-positive bandwidth {bw}")
        return None
    if lat < 0:
        errors.append(f"{where}: negative latency {lat}")
        return None
    jit = raw.get("jitter")
    jitter = None
    if jit:
        dist = jit.get("dist", "lognormal")
        if dist != "lognormal":
            errors.append(f"{where}.jitter: unsupported distribution {dist!r}")
        jitter = Jitter(dist=dist, sigma=float(jit.get("sigma", 0.25)))
    return LinkModel(bw, lat, jitter)


def validate_scenario(raw: Mapping[str, Any]) -> Scenario:
    """Resolve cross-references and check invariants; raise ScenarioError listing all problems."""
    errors: list[str] = []
    if not isinstance(raw, Mapping):
        raise ScenarioError(["scenario must be a mapping"])
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        errors.append(f"unsupported schema_version {version}")

    power_column = str(raw.get("power_column", "in"))
    if power_column not in POWER_COLUMNS:
        errors.append(f"power_column must be one of {POWER_COLUMNS}")
        power_column = "in"
    price_per_tn = float(raw.get("price_per_tn_hour", DEFAULT_PRICE_PER_TN_HOUR))

    raw_devices = raw.get("devices") or reference_devices(price_per_tn)
    baseline_id = raw.get("baseline_device", BASELINE_DEVICE)
    base_row = next((d for d in raw_devices if d.get("id") == baseline_id), None)
    if base_row is None:
        errors.append(f"baseline_device {baseline_id!r} not in device table")
        raise ScenarioError(errors)
    base_tflops = float(base_row["tflops"])
    base_iter = float(base_row["iter_time_s"])

    devices: dict[str, DevicePower] = {}
    for i, d in enumerate(raw_devices):
        where = f"devices[{i}]"
        did = d.get("id")
        if not did:
            errors.append(f"{where}: missing id")
            continue
        if did in devices:
            errors.append(f"{where}: duplicate device id {did!r}")
            continue
        kind = d.get("kind", "cpu")
        if kind not in ("cpu", "gpu"):
            errors.append(f"{where}: kind must be cpu or gpu")
        tflops = float(d.get("tflops", 0))
        it = float(d.get("iter_time_s", 0))
        if not (tflops > 0 and it > 0):
            errors.append(f"{where}: tflops and iter_time_s must be positive")
            continue
        tn_calc, in_calc = tflops / base_tflops, base_iter / it
        tn = float(d["tn"]) if "tn" in d else tn_calc
        in_norm = float(d["in_norm"]) if "in_norm" in d else in_calc
        if not _close(tn, tn_calc, NORMALIZATION_RTOL):
            errors.append(f"{where}: tn {tn} disagrees with tflops ratio {tn_calc:.6f}")
        if not _close(in_norm, in_calc, NORMALIZATION_RTOL):
            errors.append(f"{where}: in_norm {in_norm} disagrees with iteration-time ratio {in_calc:.6f}")
        price = float(d.get("price_per_unit_hour", tn * price_per_tn))
        devices[did] = DevicePower(did, kind, tflops, tn, it, in_norm, price)

    default_lan = {"bandwidth_bps": 10e9, "latency_s": 0.0}
    clouds: list[CloudSpec] = []
    seen: set[str] = set()
    for i, c in enumerate(raw.get("clouds") or []):
        where = f"clouds[{i}]"
        cid = c.get("id")
        if not cid:
            errors.append(f"{where}: missing id")
            continue
        if cid in seen:
            errors.append(f"{where}: duplicate cloud id {cid!r}")
        seen.add(cid)
        size = int(c.get("dataset_size", 0))
        if size < 0:
            errors.append(f"{where}: negative dataset_size")
        alloc = []
        for j, entry in enumerate(c.get("devices") or []):
            dev = devices.get(entry.get("device"))
            if dev is None:
                errors.append(f"{where}.devices[{j}]: unknown device id {entry.get('device')!r}")
                continue
            units = int(entry.get("max_units", 0))
            if units < 0:
                errors.append(f"{where}.devices[{j}]: negative max_units")
                continue
            alloc.append((dev, units))
        lan = _link(c.get("lan", default_lan), f"{where}.lan", errors)
        if lan is not None:
            clouds.append(CloudSpec(cid, tuple(alloc), size, lan, str(c.get("wan_endpoint", f"{cid}.wan"))))
    if not clouds and not errors:
        errors.append("scenario has no clouds")
    if clouds and sum(c.dataset_size for c in clouds) == 0:
        errors.append("zero total dataset")

    wan = _link(raw.get("wan", {"bandwidth_bps": 100e6, "latency_s": 0.02}), "wan", errors)

    strategy = None
    s = dict(raw.get("strategy") or {})
    topo = {str(k): str(v) for k, v in (s.pop("topology", None) or {}).items()}
    for sender, receiver in topo.items():
        if sender == receiver:
            errors.append(f"strategy.topology: self-loop sender {sender!r}")
        for end in (sender, receiver):
            if end not in seen:
                errors.append(f"strategy.topology: references missing cloud {end!r}")
    if not errors:
        try:
            strategy = SyncStrategyConfig(topology=topo, **s)
        except (TypeError, ValueError) as exc:
            errors.append(f"strategy: {exc}")

    trainer = data = timing = None
    try:
        t = dict(raw.get("trainer") or {})
        t.setdefault("seed", int(raw.get("seed", 0)))
        if "hidden_sizes" in t:
            t["hidden_sizes"] = tuple(int(h) for h in t["hidden_sizes"])
        trainer = TrainConfig(**t)
    except (TypeError, ValueError) as exc:
        errors.append(f"trainer: {exc}")
    try:
        data = DataConfig(**(raw.get("data") or {}))
        if data.kind not in ("blobs", "file") or data.mode not in ("split", "replicate"):
            errors.append("data: kind must be blobs|file and mode split|replicate")
        if data.kind == "file" and not data.path:
            errors.append("data: file kind requires a path")
    except TypeError as exc:
        errors.append(f"data: {exc}")
    try:
        timing = TimingConfig(**(raw.get("timing") or {}))
        if not (timing.reference_iter_time_s > 0 and timing.reference_units > 0 and timing.reference_dataset > 0):
            errors.append("timing: reference values must be positive")
    except TypeError as exc:
        errors.append(f"timing: {exc}")

    if errors:
        raise ScenarioError(errors)

    full_lp = {}
    for c in clouds:
        if c.dataset_size > 0:
            power = sum(n * d.power(power_column) for d, n in c.devices)
            full_lp[c.cloud_id] = power / c.dataset_size

    return Scenario(
        name=str(raw.get("name", "scenario")),
        seed=int(raw.get("seed", 0)),
        power_column=power_column,
        devices=tuple(devices.values()),
        baseline_device=baseline_id,
        clouds=tuple(clouds),
        wan=wan,
        strategy=strategy,
        trainer=trainer,
        data=data,
        timing=timing,
        price_per_tn_hour=price_per_tn,
        full_load_power=full_lp,
    )


def _link_to_dict(link: LinkModel) -> dict:
    out: dict[str, Any] = {"bandwidth_bps": link.bandwidth_bps, "latency_s": link.latency_s}
    if link.jitter is not None:
        out["jitter"] = {"dist": link.jitter.dist, "sigma": link.jitter.sigma}
    return out


def scenario_to_dict(sc: Scenario) -> dict:
    strategy = {
        "kind": sc.strategy.kind,
        "sync_frequency": sc.strategy.sync_frequency,
        "accumulation_mode": sc.strategy.accumulation_mode,
        "topology": dict(sc.strategy.topology),
        "scale_by_window": sc.strategy.scale_by_window,
    }
    if sc.strategy.lr_sync is not None:
        strategy["lr_sync"] = sc.strategy.lr_sync
    trainer = {
        "model_kind": sc.trainer.model_kind,
        "hidden_sizes": list(sc.trainer.hidden_sizes),
        "learning_rate": sc.trainer.learning_rate,
        "batch_size": sc.trainer.batch_size,
        "epochs": sc.trainer.epochs,
        "seed": sc.trainer.seed,
    }
    if sc.trainer.iters_per_epoch is not None:
        trainer["iters_per_epoch"] = sc.trainer.iters_per_epoch
    data = {k: v for k, v in vars(sc.data).items() if v is not None}
    timing = {k: v for k, v in vars(sc.timing).items() if v is not None}
    return {
        "schema_version": sc.schema_version,
        "name": sc.name,
        "seed": sc.seed,
        "power_column": sc.power_column,
        "price_per_tn_hour": sc.price_per_tn_hour,
        "baseline_device": sc.baseline_device,
        "devices": [
            {
                "id": d.device_id,
                "kind": d.kind,
                "tflops": d.tflops,
                "tn": d.tn,
                "iter_time_s": d.iter_time_s,
                "in_norm": d.in_norm,
                "price_per_unit_hour": d.price_per_unit_hour,
            }
            for d in sc.devices
        ],
        "clouds": [
            {
                "id": c.cloud_id,
                "dataset_size": c.dataset_size,
                "devices": [{"device": d.device_id, "max_units": n} for d, n in c.devices],
                "lan": _link_to_dict(c.lan_model),
                "wan_endpoint": c.wan_endpoint,
            }
            for c in sc.clouds
        ],
        "wan": _link_to_dict(sc.wan),
        "strategy": strategy,
        "trainer": trainer,
        "data": data,
        "timing": timing,
    }


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario file. YAML syntax errors become ScenarioError with line context."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark else str(path)
        raise ScenarioError([f"{where}: {getattr(exc, 'problem', exc)}"]) from exc
    return validate_scenario(raw)


def dump_scenario(sc: Scenario) -> str:
    return yaml.safe_dump(scenario_to_dict(sc), sort_keys=False, default_flow_style=False)


def make_balance_scenario(
    case: int,
    *,
    total: int = 2000,
    seed: int = 7,
    strategy: Mapping[str, Any] | None = None,
    trainer: Mapping[str, Any] | None = None,
) -> Scenario:
    """Two-cloud SH/CQ scenario for one of the three load-balancing cases (0 = symmetric control)."""
    ratio, cq_device = {0: ((1, 1), "Cascade"), 1: ((1, 1), "Sky"), 2: ((2, 1), "Cascade"), 3: ((2, 1), "Sky")}[case]
    sh_size = total * ratio[0] // sum(ratio)
    raw = {
        "schema_version": SCHEMA_VERSION,
        "name": f"balance-case-{case}",
        "seed": seed,
        "devices": reference_devices(),
        "clouds": [
            {"id": "SH", "dataset_size": sh_size, "devices": [{"device": "Cascade", "max_units": 12}]},
            {"id": "CQ", "dataset_size": total - sh_size, "devices": [{"device": cq_device, "max_units": 12}]},
        ],
        "wan": {"bandwidth_bps": 100e6, "latency_s": 0.02},
        "strategy": dict(strategy or {"kind": "asgd_ga", "sync_frequency": 4}),
        "trainer": dict(trainer or {"learning_rate": 0.5, "batch_size": 50, "epochs": 10}),
        "data": {"kind": "blobs", "dims": 10, "margin": 0.5},
        "timing": {"reference_dataset": max(1, total // 2)},
    }
    return validate_scenario(raw)
