"""Synthetic fleets: waveform bases, dependency recipes, anomaly injection.

Two families:

* ``sincos`` — paired sine/cosine metrics where each pair shares one random
  frequency, plus additive Gaussian noise. Mirrors the classic correlated
  sinusoid benchmark.
* ``waves`` — bases drawn from four waveform families (sin, cos, sawtooth,
  square) with periods from a quantized set, derived metrics built from
  linear / non-linear recipes and higher-order compositions of those, with
  small bounded noise. The recipe graph is recorded in frame metadata, so
  recipe residuals are checkable from the generated data alone: each derived
  metric equals its recipe applied to the stored inputs plus its own noise
  term, which is clipped at 2.5 sigma.

Generation is a pure function of (spec, entity index): every stream of draws
comes from a seed tree rooted at ``spec.seed``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SeriesFrame
from .errors import ContractError, PlanError, SpecError

WAVEFORMS = ("sin", "cos", "sawtooth", "square")
ANOMALY_TYPES = ("spike", "flatline", "corr_break")
VISIBILITY_FLOOR = 0.2  # flatlines must deviate by this fraction of range somewhere


@dataclass
class Recipe:
    name: str
    kind: str                 # linear | product | reludiff | square
    inputs: list[str]
    coeffs: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        out = {"name": self.name, "kind": self.kind, "inputs": list(self.inputs)}
        if self.coeffs:
            out["coeffs"] = list(self.coeffs)
        return out


@dataclass
class AnomalyGroup:
    count: int
    duration_range: tuple[int, int] = (8, 20)
    magnitude: float = 0.8
    types: tuple[str, ...] = ANOMALY_TYPES
    region: tuple[float, float] = (0.5, 1.0)
    targets_per_event: tuple[int, int] = (2, 3)
    min_gap: int = 1  # clean points required between events


@dataclass
class AnomalyPlan:
    groups: list[AnomalyGroup]
    seed: int


@dataclass
class SyntheticSpec:
    family: str = "waves"            # waves | sincos
    n_metrics: int = 18
    n_points: int = 4800
    n_entities: int = 32
    seed: int = 7
    waveforms: tuple[str, ...] = WAVEFORMS
    period_choices: tuple[int, ...] = (32, 64, 96, 128)   # waves family
    freq_range: tuple[float, float] = (40.0, 50.0)        # sincos family (omega)
    noise: float = 0.01
    recipes: list[Recipe] | None = None                    # None = auto-built graph
    anomalies: list[AnomalyGroup] = field(default_factory=list)

    def validate(self) -> None:
        if self.family not in ("waves", "sincos"):
            raise SpecError(f"family must be 'waves' or 'sincos', got {self.family!r}")
        if self.n_metrics < 2:
            raise SpecError(f"n_metrics must be >= 2, got {self.n_metrics}")
        if self.family == "waves" and self.n_metrics < 4:
            raise SpecError("waves family needs n_metrics >= 4")
        if self.n_points < 1:
            raise SpecError("n_points must be positive")
        if self.n_entities < 1:
            raise SpecError("n_entities must be positive")
        unknown = set(self.waveforms) - set(WAVEFORMS)
        if unknown:
            raise SpecError(f"unknown waveforms {sorted(unknown)}")
        if self.family == "sincos" and not set(self.waveforms) <= {"sin", "cos"}:
            raise SpecError("sincos family allows only sin and cos waveforms")
        if self.noise < 0:
            raise SpecError("noise must be >= 0")
        for g in self.anomalies:
            if g.count < 0:
                raise SpecError("anomaly count must be >= 0")
            if not (0 < g.duration_range[0] <= g.duration_range[1]):
                raise SpecError(f"bad duration_range {g.duration_range}")
            if not (0.0 <= g.region[0] < g.region[1] <= 1.0):
                raise SpecError(f"bad region {g.region}")
            bad = set(g.types) - set(ANOMALY_TYPES)
            if bad:
                raise SpecError(f"unknown anomaly types {sorted(bad)}")


def metric_names(n: int) -> list[str]:
    return [f"m{i:02d}" for i in range(n)]


# ---------------------------------------------------------------------------
# spec JSON
# ---------------------------------------------------------------------------

_SPEC_FIELDS = {
    "family", "n_metrics", "n_points", "n_entities", "seed", "waveforms",
    "period_choices", "freq_range", "noise", "recipes", "anomalies",
}
_GROUP_FIELDS = {"count", "duration_range", "magnitude", "types", "region",
                 "targets_per_event", "min_gap"}
_RECIPE_FIELDS = {"name", "kind", "inputs", "coeffs"}


def spec_from_dict(doc: dict) -> SyntheticSpec:
    unknown = set(doc) - _SPEC_FIELDS
    if unknown:
        raise SpecError(f"unknown spec keys: {sorted(unknown)}")
    kwargs = dict(doc)
    if "recipes" in kwargs and kwargs["recipes"] is not None:
        recipes = []
        for r in kwargs["recipes"]:
            bad = set(r) - _RECIPE_FIELDS
            if bad:
                raise SpecError(f"unknown recipe keys: {sorted(bad)}")
            recipes.append(Recipe(name=r["name"], kind=r["kind"],
                                  inputs=list(r["inputs"]),
                                  coeffs=list(r.get("coeffs", []))))
        kwargs["recipes"] = recipes
    if "anomalies" in kwargs:
        groups = []
        for g in kwargs["anomalies"]:
            bad = set(g) - _GROUP_FIELDS
            if bad:
                raise SpecError(f"unknown anomaly keys: {sorted(bad)}")
            groups.append(AnomalyGroup(
                count=g["count"],
                duration_range=tuple(g.get("duration_range", (8, 20))),
                magnitude=g.get("magnitude", 0.8),
                types=tuple(g.get("types", ANOMALY_TYPES)),
                region=tuple(g.get("region", (0.5, 1.0))),
                targets_per_event=tuple(g.get("targets_per_event", (2, 3))),
                min_gap=g.get("min_gap", 1),
            ))
        kwargs["anomalies"] = groups
    for key in ("waveforms", "period_choices", "freq_range"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    spec = SyntheticSpec(**kwargs)
    spec.validate()
    return spec


def load_spec(path: str | Path) -> SyntheticSpec:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise SpecError(f"{path}: spec must be a JSON object")
    return spec_from_dict(doc)


def spec_to_dict(spec: SyntheticSpec) -> dict:
    return {
        "family": spec.family,
        "n_metrics": spec.n_metrics,
        "n_points": spec.n_points,
        "n_entities": spec.n_entities,
        "seed": spec.seed,
        "waveforms": list(spec.waveforms),
        "period_choices": list(spec.period_choices),
        "freq_range": list(spec.freq_range),
        "noise": spec.noise,
        "recipes": None if spec.recipes is None else [r.to_json() for r in spec.recipes],
        "anomalies": [
            {
                "count": g.count,
                "duration_range": list(g.duration_range),
                "magnitude": g.magnitude,
                "types": list(g.types),
                "region": list(g.region),
                "targets_per_event": list(g.targets_per_event),
                "min_gap": g.min_gap,
            }
            for g in spec.anomalies
        ],
    }


def default_spec() -> SyntheticSpec:
    """The stock fleet: 32 entities, 18 metrics, 4800 points, 10 anomalies
    each (3 in the calibration tail of the training half, 7 in the test half)."""
    # validation events sit early enough that their post-event shadows stay
    # inside the validation slice, so threshold calibration sees their cost
    # wide gaps keep one event's post-event error shadow clear of the next
    return SyntheticSpec(
        anomalies=[
            AnomalyGroup(count=3, region=(0.36, 0.455), min_gap=120),
            AnomalyGroup(count=7, region=(0.52, 0.97), min_gap=170),
        ],
    )


# ---------------------------------------------------------------------------
# seed tree
# ---------------------------------------------------------------------------


def _entity_rngs(spec: SyntheticSpec, entity: int):
    """(structure, params, noise, anomaly_seed) for one entity.

    Child 0 of the seed tree drives fleet-shared structure; each entity gets
    three private children for waveform params, noise, and anomaly placement.
    """
    children = np.random.SeedSequence(spec.seed).spawn(1 + 3 * (entity + 1))
    structure = np.random.default_rng(children[0])
    params = np.random.default_rng(children[1 + 3 * entity])
    noise = np.random.default_rng(children[2 + 3 * entity])
    anomaly_seed = int(children[3 + 3 * entity].generate_state(1)[0])
    return structure, params, noise, anomaly_seed


# ---------------------------------------------------------------------------
# sincos family
# ---------------------------------------------------------------------------


def gen_sincos_synthetic(spec: SyntheticSpec, entity: int = 0) -> SeriesFrame:
    """Paired sinusoids: s(t) = trig((t - t0) / omega) + noise * eps(t).

    Metrics 2i and 2i+1 share omega, so correlated pairs have matching
    frequencies; phases are independent.
    """
    if spec.n_metrics < 2:
        raise ContractError("gen_sincos_synthetic: n_metrics must be >= 2")
    allowed = set(spec.waveforms) & {"sin", "cos"}
    if not allowed:
        raise SpecError("sincos family needs sin and/or cos in the waveform mix")
    _, params, noise_rng, _ = _entity_rngs(spec, entity)
    t = np.arange(spec.n_points, dtype=np.float64)
    values = np.empty((spec.n_metrics, spec.n_points))
    trigs = sorted(allowed)
    lo, hi = spec.freq_range
    for pair in range((spec.n_metrics + 1) // 2):
        omega = params.uniform(lo, hi)
        for member in range(2):
            i = 2 * pair + member
            if i >= spec.n_metrics:
                break
            t0 = params.uniform(0.0, 2.0 * np.pi * omega)
            trig = np.sin if trigs[(pair + member) % len(trigs)] == "sin" else np.cos
            values[i] = trig((t - t0) / omega)
    if spec.noise > 0:
        values += spec.noise * noise_rng.standard_normal(values.shape)
    return SeriesFrame(
        metric_names=metric_names(spec.n_metrics),
        timestamps=np.arange(spec.n_points, dtype=np.int64) * 60,
        values=values,
        meta={"family": "sincos", "entity": entity},
    )


# ---------------------------------------------------------------------------
# waves family
# ---------------------------------------------------------------------------


def _auto_recipes(n_metrics: int, structure: np.random.Generator) -> tuple[int, list[Recipe]]:
    """Deterministic recipe graph shared by every entity of a spec."""
    names = metric_names(n_metrics)
    n_bases = max(4, int(round(0.45 * n_metrics)))
    n_derived = n_metrics - n_bases
    n_high = max(1, n_derived // 4) if n_derived >= 2 else 0
    n_lvl1 = n_derived - n_high
    kinds = ["linear", "linear", "product", "reludiff", "square"]
    recipes: list[Recipe] = []
    for i in range(n_lvl1):
        kind = kinds[i % len(kinds)]
        a, b = names[(2 * i) % n_bases], names[(2 * i + 1) % n_bases]
        name = names[n_bases + i]
        if kind == "linear":
            w = float(structure.uniform(0.3, 0.7))
            recipes.append(Recipe(name, "linear", [a, b], [w, 1.0 - w]))
        elif kind == "square":
            recipes.append(Recipe(name, "square", [a]))
        else:
            recipes.append(Recipe(name, kind, [a, b]))
    lvl1_names = [r.name for r in recipes]
    high_kinds = ["reludiff", "square"]
    for h in range(n_high):
        kind = high_kinds[h % len(high_kinds)]
        name = names[n_bases + n_lvl1 + h]
        if kind == "square":
            recipes.append(Recipe(name, "square", [lvl1_names[(2 * h) % len(lvl1_names)]]))
        else:
            a = lvl1_names[(2 * h) % len(lvl1_names)]
            b = lvl1_names[(2 * h + 1) % len(lvl1_names)]
            recipes.append(Recipe(name, "reludiff", [a, b]))
    return n_bases, recipes


def eval_recipe(recipe: Recipe, columns: dict[str, np.ndarray]) -> np.ndarray:
    for inp in recipe.inputs:
        if inp not in columns:
            raise SpecError(f"recipe {recipe.name!r} references unknown metric {inp!r}")
    x = [columns[i] for i in recipe.inputs]
    if recipe.kind == "linear":
        coeffs = recipe.coeffs or [1.0 / len(x)] * len(x)
        if len(coeffs) != len(x):
            raise SpecError(f"recipe {recipe.name!r}: coeffs/inputs length mismatch")
        return sum(c * xi for c, xi in zip(coeffs, x))
    if recipe.kind == "product":
        out = x[0].copy()
        for xi in x[1:]:
            out = out * xi
        return out
    if recipe.kind == "reludiff":
        if len(x) != 2:
            raise SpecError(f"recipe {recipe.name!r}: reludiff needs two inputs")
        return np.maximum(x[0] - x[1], 0.0)
    if recipe.kind == "square":
        return x[0] * x[0]
    raise SpecError(f"recipe {recipe.name!r}: unknown kind {recipe.kind!r}")


def _base_wave(kind: str, n_points: int, period: float, t0: float) -> np.ndarray:
    t = np.arange(n_points, dtype=np.float64)
    phase = 2.0 * np.pi * (t - t0) / period
    if kind == "sin":
        return 0.5 + 0.45 * np.sin(phase)
    if kind == "cos":
        return 0.5 + 0.45 * np.cos(phase)
    if kind == "sawtooth":
        return 0.05 + 0.9 * (((t - t0) / period) % 1.0)
    if kind == "square":
        return np.where(np.sin(phase) < 0.0, 0.1, 0.9)
    raise SpecError(f"unknown waveform {kind!r}")


def _clipped_noise(rng: np.random.Generator, sigma: float, shape) -> np.ndarray:
    if sigma <= 0:
        return np.zeros(shape)
    return np.clip(rng.standard_normal(shape), -2.5, 2.5) * sigma


def gen_recipe_synthetic(spec: SyntheticSpec, entity: int = 0) -> SeriesFrame:
    """Waveform bases plus derived metrics from the recipe graph.

    Base periods/phases vary per entity; the recipe graph (structure and
    coefficients) is shared across the fleet and recorded in frame metadata.
    """
    if spec.n_metrics < 4:
        raise ContractError("gen_recipe_synthetic: n_metrics must be >= 4")
    structure, params, noise_rng, _ = _entity_rngs(spec, entity)
    if spec.recipes is None:
        n_bases, recipes = _auto_recipes(spec.n_metrics, structure)
    else:
        recipes = spec.recipes
        derived = {r.name for r in recipes}
        n_bases = spec.n_metrics - len(derived)
    names = metric_names(spec.n_metrics)
    derived_names = [r.name for r in recipes]
    for dn in derived_names:
        if dn not in names:
            raise SpecError(f"recipe output {dn!r} is not one of the spec's metrics")
    base_names = [n for n in names if n not in set(derived_names)]
    if len(base_names) != n_bases:
        raise SpecError("recipe outputs overlap or miss metrics")

    columns: dict[str, np.ndarray] = {}
    for j, name in enumerate(base_names):
        kind = spec.waveforms[j % len(spec.waveforms)]
        period = float(params.choice(np.asarray(spec.period_choices, dtype=np.float64)))
        t0 = params.uniform(0.0, period)
        wave = _base_wave(kind, spec.n_points, period, t0)
        columns[name] = wave + _clipped_noise(noise_rng, spec.noise, spec.n_points)
    for recipe in recipes:
        clean = eval_recipe(recipe, columns)
        columns[recipe.name] = clean + _clipped_noise(noise_rng, spec.noise, spec.n_points)

    values = np.stack([columns[n] for n in names])
    return SeriesFrame(
        metric_names=names,
        timestamps=np.arange(spec.n_points, dtype=np.int64) * 60,
        values=values,
        meta={
            "family": "waves",
            "entity": entity,
            "recipes": [r.to_json() for r in recipes],
            "noise": spec.noise,
        },
    )


def generate_entity(spec: SyntheticSpec, entity: int = 0) -> SeriesFrame:
    """One entity of the fleet, anomalies injected per the spec's plan."""
    spec.validate()
    if spec.family == "sincos":
        frame = gen_sincos_synthetic(spec, entity)
    else:
        frame = gen_recipe_synthetic(spec, entity)
    *_, anomaly_seed = _entity_rngs(spec, entity)
    plan = AnomalyPlan(groups=list(spec.anomalies), seed=anomaly_seed)
    return inject_anomalies(frame, plan)


def generate_fleet(spec: SyntheticSpec) -> list[SeriesFrame]:
    return [generate_entity(spec, e) for e in range(spec.n_entities)]


# ---------------------------------------------------------------------------
# anomaly injection
# ---------------------------------------------------------------------------


def inject_anomalies(frame: SeriesFrame, plan: AnomalyPlan) -> SeriesFrame:
    """Inject spike / flatline / correlation-break events; labels mark exactly
    the injected ranges. Events are disjoint (re-drawn on collision) and
    flatlines are re-drawn until they visibly deviate from the clean signal.
    """
    rng = np.random.default_rng(plan.seed)
    T = frame.n_points
    values = frame.values.copy()
    labels = np.zeros(T, dtype=np.int8)
    ranges = values.max(axis=1) - values.min(axis=1)
    ranges[ranges == 0] = 1.0
    derived = [frame.metric_names.index(r["name"])
               for r in frame.meta.get("recipes", [])]
    occupied = np.zeros(T, dtype=bool)
    records: list[dict] = []

    for group in plan.groups:
        lo = int(np.ceil(group.region[0] * T))
        hi = int(np.floor(group.region[1] * T))
        for _ in range(group.count):
            duration = int(rng.integers(group.duration_range[0], group.duration_range[1] + 1))
            if duration >= T or hi - lo < duration + 2:
                raise PlanError(
                    f"anomaly of length {duration} does not fit region [{lo}, {hi}) of {T} points"
                )
            kind = str(rng.choice(list(group.types)))
            placed = False
            for _attempt in range(1000):
                start = int(rng.integers(max(lo, 1), hi - duration + 1))
                gap = max(group.min_gap, 1)
                if occupied[max(0, start - gap):start + duration + gap].any():
                    continue
                t_lo, t_hi = group.targets_per_event
                n_targets = int(rng.integers(t_lo, t_hi + 1))
                n_targets = min(n_targets, frame.n_metrics)
                if kind == "corr_break" and derived:
                    first = int(rng.choice(derived))
                    rest = [m for m in range(frame.n_metrics) if m != first]
                    targets = [first] + [int(m) for m in rng.choice(rest, size=n_targets - 1,
                                                                    replace=False)]
                else:
                    targets = [int(m) for m in rng.choice(frame.n_metrics, size=n_targets,
                                                          replace=False)]
                if kind == "flatline":
                    visible = all(
                        np.max(np.abs(values[m, start:start + duration] - values[m, start - 1]))
                        >= VISIBILITY_FLOOR * ranges[m]
                        for m in targets
                    )
                    if not visible and _attempt < 200:
                        continue
                placed = True
                break
            if not placed:
                raise PlanError("could not place a disjoint anomaly; region too crowded")
            end = start + duration
            for m in targets:
                if kind == "spike":
                    sign = 1.0 if rng.random() < 0.5 else -1.0
                    values[m, start:end] += sign * group.magnitude * ranges[m]
                elif kind == "flatline":
                    values[m, start:end] = values[m, start - 1]
                else:  # corr_break: replace with an independent waveform
                    period = rng.uniform(10.0, 40.0)
                    t0 = rng.uniform(0.0, period)
                    t = np.arange(start, end, dtype=np.float64)
                    mid = values[m].min() + 0.5 * ranges[m]
                    values[m, start:end] = mid + 0.5 * ranges[m] * np.sin(
                        2.0 * np.pi * (t - t0) / period)
            occupied[start:end] = True
            labels[start:end] = 1
            records.append({
                "type": kind,
                "start": int(start),
                "length": int(duration),
                "metrics": [frame.metric_names[m] for m in targets],
            })

    meta = dict(frame.meta)
    meta["anomalies"] = records
    return SeriesFrame(
        metric_names=list(frame.metric_names),
        timestamps=frame.timestamps.copy(),
        values=values,
        labels=labels,
        meta=meta,
    )
