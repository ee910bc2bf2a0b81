"""Dataset ingestion, normalization, windowing, splitting, and a synthetic
multimode-process generator.

CSV contract: UTF-8, comma-separated, header row; any number of numeric
variable columns followed by an integer ``label`` column and an optional
integer ``mode`` column; rows in time order; one simulation run per file.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "RawSeries",
    "NormStats",
    "WindowedDataset",
    "SplitSpec",
    "GeneratorConfig",
    "ModeSpec",
    "FaultSpec",
    "load_csv",
    "write_csv",
    "compute_norm_stats",
    "apply_zscore",
    "slide_windows",
    "merge_datasets",
    "stratified_split",
    "synth_generate",
]

STD_FLOOR = 1e-8

FAULT_TYPES = ("step", "random_variation", "drift", "sticking")


@dataclass
class RawSeries:
    """One contiguous multivariate run: N rows of v sensor readings with a
    health-condition label per row and an optional (metadata-only) mode tag."""

    variables: np.ndarray           # (N, v) float64
    labels: np.ndarray              # (N,) int64
    mode_tags: np.ndarray | None = None
    var_names: tuple[str, ...] | None = None

    def __post_init__(self):
        self.variables = np.asarray(self.variables, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.variables.ndim != 2 or self.variables.shape[0] < 1:
            raise ValueError(f"variables must be a non-empty 2-D matrix, got {self.variables.shape}")
        if self.labels.shape != (self.variables.shape[0],):
            raise ValueError("labels length must equal the number of rows")
        if (self.labels < 0).any():
            raise ValueError("labels must be non-negative")
        if self.mode_tags is not None:
            self.mode_tags = np.asarray(self.mode_tags, dtype=np.int64)
            if self.mode_tags.shape != self.labels.shape:
                raise ValueError("mode_tags length must equal the number of rows")

    @property
    def n_rows(self) -> int:
        return self.variables.shape[0]

    @property
    def n_vars(self) -> int:
        return self.variables.shape[1]


@dataclass
class NormStats:
    """Per-variable z-score statistics estimated from fault-free rows only."""

    mean: np.ndarray
    std: np.ndarray
    source: str

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "source": self.source}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64),
                   np.asarray(d["std"], dtype=np.float64), d["source"])


@dataclass
class WindowedDataset:
    """Sliding windows (each ``(v, w)``, labeled by its final time step)."""

    windows: list[np.ndarray]
    labels: np.ndarray
    w: int
    mode_tags: np.ndarray | None = None
    stats: NormStats | None = None

    def __len__(self) -> int:
        return len(self.windows)

    def subset(self, indices: Sequence[int]) -> "WindowedDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return WindowedDataset(
            windows=[self.windows[i] for i in idx],
            labels=self.labels[idx],
            w=self.w,
            mode_tags=None if self.mode_tags is None else self.mode_tags[idx],
            stats=self.stats,
        )


@dataclass
class SplitSpec:
    """Stratified train/val/test fractions; strata are (class, mode) pairs
    when mode tags exist and classes alone otherwise."""

    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        total = self.train_frac + self.val_frac + self.test_frac
        if not math.isclose(total, 1.0, rel_tol=0, abs_tol=1e-9):
            raise ValueError(f"split fractions must sum to 1, got {total}")
        if min(self.train_frac, self.val_frac, self.test_frac) < 0:
            raise ValueError("split fractions must be non-negative")


# -- CSV I/O ---------------------------------------------------------------------


def load_csv(path: str) -> RawSeries:
    """Parse one run. Rejects missing/renamed columns, non-numeric cells and
    negative labels, naming the offending row and column."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if "label" not in header:
            raise ValueError(f"{path}: missing required column 'label'")
        label_idx = header.index("label")
        mode_idx = header.index("mode") if "mode" in header else None
        var_idx = [i for i in range(len(header)) if i not in (label_idx, mode_idx)]
        if not var_idx:
            raise ValueError(f"{path}: no variable columns")

        rows: list[list[float]] = []
        labels: list[int] = []
        modes: list[int] = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}: row {lineno}: expected {len(header)} cells, got {len(row)}")
            try:
                rows.append([float(row[i]) for i in var_idx])
            except ValueError:
                bad = next(i for i in var_idx if not _is_float(row[i]))
                raise ValueError(
                    f"{path}: row {lineno}: non-numeric value {row[bad]!r} "
                    f"in column {header[bad]!r}") from None
            labels.append(_parse_int(row[label_idx], path, lineno, "label"))
            if mode_idx is not None:
                modes.append(_parse_int(row[mode_idx], path, lineno, "mode"))
        if not rows:
            raise ValueError(f"{path}: no data rows")
    return RawSeries(
        variables=np.array(rows, dtype=np.float64),
        labels=np.array(labels, dtype=np.int64),
        mode_tags=np.array(modes, dtype=np.int64) if mode_idx is not None else None,
        var_names=tuple(header[i] for i in var_idx),
    )


def _is_float(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def _parse_int(cell: str, path: str, lineno: int, col: str) -> int:
    try:
        value = int(cell)
    except ValueError:
        raise ValueError(
            f"{path}: row {lineno}: column {col!r} must be an integer, got {cell!r}") from None
    if value < 0:
        raise ValueError(f"{path}: row {lineno}: column {col!r} must be non-negative, got {value}")
    return value


def write_csv(series: RawSeries, path: str) -> None:
    """Write a run; floats use shortest round-trip formatting so a
    write-then-load cycle reproduces values exactly."""
    names = series.var_names or tuple(f"var_{i + 1}" for i in range(series.n_vars))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = list(names) + ["label"]
        if series.mode_tags is not None:
            header.append("mode")
        writer.writerow(header)
        for i in range(series.n_rows):
            row = [repr(float(x)) for x in series.variables[i]]
            row.append(str(int(series.labels[i])))
            if series.mode_tags is not None:
                row.append(str(int(series.mode_tags[i])))
            writer.writerow(row)


# -- normalization ------------------------------------------------------------------


def compute_norm_stats(series: RawSeries, normal_label: int = 0) -> NormStats:
    """Per-variable mean and population std over fault-free rows only,
    pooled across all modes. The std is floored at 1e-8."""
    mask = series.labels == normal_label
    n_normal = int(mask.sum())
    if n_normal < 2:
        raise ValueError(
            f"need at least 2 rows with label {normal_label} to estimate stats, got {n_normal}")
    sub = series.variables[mask]
    mean = sub.mean(axis=0)
    std = sub.std(axis=0)  # population divisor
    floored = np.flatnonzero(std < STD_FLOOR)
    std = np.maximum(std, STD_FLOOR)
    source = f"{n_normal} fault-free rows (label {normal_label})"
    if floored.size:
        source += f"; std floored for variables {floored.tolist()}"
    return NormStats(mean=mean, std=std, source=source)


def apply_zscore(series: RawSeries, stats: NormStats) -> RawSeries:
    if stats.mean.shape != (series.n_vars,):
        raise ValueError(
            f"stats cover {stats.mean.shape[0]} variables, series has {series.n_vars}")
    return RawSeries(
        variables=(series.variables - stats.mean) / stats.std,
        labels=series.labels.copy(),
        mode_tags=None if series.mode_tags is None else series.mode_tags.copy(),
        var_names=series.var_names,
    )


# -- windowing & splitting -------------------------------------------------------------


def slide_windows(series: RawSeries, w: int, stats: NormStats | None = None) -> WindowedDataset:
    """Stride-1 windows of length ``w``; window k covers rows [k-w+1, k] and
    takes the label (and mode tag) of row k. Never spans run boundaries."""
    if w < 1:
        raise ValueError("window length must be positive")
    if series.n_rows < w:
        raise ValueError(
            f"series has {series.n_rows} rows, too short for window length {w}")
    vt = series.variables.T  # (v, N); windows are views into this
    windows = [vt[:, k - w + 1:k + 1] for k in range(w - 1, series.n_rows)]
    labels = series.labels[w - 1:].copy()
    modes = None if series.mode_tags is None else series.mode_tags[w - 1:].copy()
    return WindowedDataset(windows=windows, labels=labels, w=w,
                           mode_tags=modes, stats=stats)


def merge_datasets(datasets: Sequence[WindowedDataset]) -> WindowedDataset:
    if not datasets:
        raise ValueError("nothing to merge")
    w = datasets[0].w
    if any(d.w != w for d in datasets):
        raise ValueError("window lengths differ between datasets")
    has_modes = all(d.mode_tags is not None for d in datasets)
    windows: list[np.ndarray] = []
    for d in datasets:
        windows.extend(d.windows)
    return WindowedDataset(
        windows=windows,
        labels=np.concatenate([d.labels for d in datasets]),
        w=w,
        mode_tags=np.concatenate([d.mode_tags for d in datasets]) if has_modes else None,
        stats=datasets[0].stats,
    )


def stratified_split(ds: WindowedDataset, spec: SplitSpec
                     ) -> tuple[WindowedDataset, WindowedDataset, WindowedDataset]:
    """Shuffle each stratum with the spec seed, give floor(train_frac*n) to
    train, and split the remainder as evenly as possible (val gets the extra
    element on odd remainders). The result is an exact partition."""
    if len(ds) == 0:
        raise ValueError("cannot split an empty dataset")
    if ds.mode_tags is not None:
        keys = list(zip(ds.labels.tolist(), ds.mode_tags.tolist()))
    else:
        keys = [(label,) for label in ds.labels.tolist()]
    strata: dict[tuple, list[int]] = {}
    for i, key in enumerate(keys):
        strata.setdefault(key, []).append(i)

    rng = np.random.default_rng(spec.seed)
    train_idx: list[int] = []
    val_idx: list[int] = []
    test_idx: list[int] = []
    for key in sorted(strata):
        members = np.asarray(strata[key], dtype=np.int64)
        if members.size == 0:
            raise ValueError(f"empty stratum {key}")
        perm = members[rng.permutation(members.size)]
        n = perm.size
        n_train = math.floor(spec.train_frac * n)
        rest = n - n_train
        if spec.val_frac + spec.test_frac > 0:
            n_val = math.ceil(rest * spec.val_frac / (spec.val_frac + spec.test_frac))
        else:
            n_val = 0
        train_idx.extend(perm[:n_train].tolist())
        val_idx.extend(perm[n_train:n_train + n_val].tolist())
        test_idx.extend(perm[n_train + n_val:].tolist())
    return (ds.subset(sorted(train_idx)), ds.subset(sorted(val_idx)),
            ds.subset(sorted(test_idx)))


# -- synthetic multimode process ----------------------------------------------------------
#
# Each variable group is one control loop recorded as a (process value,
# actuator) pair. The plant is a stable second-order lag driven by the
# actuator, a disturbance input, and white process noise; a PI controller
# with clamped output regulates the deviation from the mode's setpoint.
# Modes shift the recorded operating point of both variables and scale the
# controller gain, so both levels and closed-loop dynamics are mode-specific.

_PLANT_A1 = 1.2
_PLANT_A2 = -0.32
_PLANT_B0 = 0.12          # DC gain 1: b0 / (1 - a1 - a2)
_KP = 0.6
_KI = 0.08
_U_LIMIT = 2.5            # actuator authority; large steps saturate it


@dataclass
class ModeSpec:
    setpoints: tuple[float, ...]   # per-group operating point
    gain: float = 1.0              # controller gain multiplier

    @classmethod
    def from_dict(cls, d: dict) -> "ModeSpec":
        _reject_unknown(d, {"setpoints", "gain"}, "mode")
        return cls(setpoints=tuple(float(s) for s in d["setpoints"]),
                   gain=float(d.get("gain", 1.0)))

    def to_dict(self) -> dict:
        return {"setpoints": list(self.setpoints), "gain": self.gain}


@dataclass
class FaultSpec:
    type: str                      # one of FAULT_TYPES
    group: int                     # target variable group
    magnitude: float = 0.5         # step size / noise bound / drift per step

    def __post_init__(self):
        if self.type not in FAULT_TYPES:
            raise ValueError(f"fault type must be one of {FAULT_TYPES}, got {self.type!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "FaultSpec":
        _reject_unknown(d, {"type", "group", "magnitude"}, "fault")
        return cls(type=d["type"], group=int(d["group"]),
                   magnitude=float(d.get("magnitude", 0.5)))

    def to_dict(self) -> dict:
        return {"type": self.type, "group": self.group, "magnitude": self.magnitude}


@dataclass
class GeneratorConfig:
    modes: list[ModeSpec]
    faults: list[FaultSpec]
    segment_len: int = 2111
    noise_std: float = 0.05
    injection_frac: float = 1.0 / 3.0
    seed: int = 0

    def __post_init__(self):
        if len(self.modes) < 2:
            raise ValueError(f"need at least 2 modes, got {len(self.modes)}")
        if len(self.faults) < 1:
            raise ValueError("need at least 1 fault archetype (L >= 2)")
        groups = len(self.modes[0].setpoints)
        if groups < 1 or any(len(m.setpoints) != groups for m in self.modes):
            raise ValueError("every mode must list the same, non-empty setpoint vector")
        for f in self.faults:
            if not 0 <= f.group < groups:
                raise ValueError(f"fault targets group {f.group}, but there are {groups} groups")
        if self.segment_len < 4:
            raise ValueError("segment_len too small")
        if not 0.0 < self.injection_frac < 1.0:
            raise ValueError("injection_frac must be in (0, 1)")
        if self.noise_std <= 0:
            raise ValueError("noise_std must be positive")

    @property
    def n_groups(self) -> int:
        return len(self.modes[0].setpoints)

    @property
    def n_vars(self) -> int:
        return 2 * self.n_groups

    @property
    def n_classes(self) -> int:
        return len(self.faults) + 1

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        _reject_unknown(d, {"modes", "faults", "segment_len", "noise_std",
                            "injection_frac", "seed"}, "generator")
        return cls(
            modes=[ModeSpec.from_dict(m) for m in d["modes"]],
            faults=[FaultSpec.from_dict(f) for f in d["faults"]],
            segment_len=int(d.get("segment_len", 2111)),
            noise_std=float(d.get("noise_std", 0.05)),
            injection_frac=float(d.get("injection_frac", 1.0 / 3.0)),
            seed=int(d.get("seed", 0)),
        )

    def to_dict(self) -> dict:
        return {
            "modes": [m.to_dict() for m in self.modes],
            "faults": [f.to_dict() for f in self.faults],
            "segment_len": self.segment_len,
            "noise_std": self.noise_std,
            "injection_frac": self.injection_frac,
            "seed": self.seed,
        }


def _reject_unknown(d: dict, allowed: set[str], what: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown {what} config keys: {sorted(unknown)}")


def default_generator_config(n_modes: int = 3, n_groups: int = 4,
                             seed: int = 0) -> GeneratorConfig:
    """A ready-to-run config: well-separated mode setpoints and one fault
    archetype per group (cycled if there are more groups than types)."""
    modes = []
    for m in range(n_modes):
        setpoints = tuple(2.0 * m + 0.7 * g for g in range(n_groups))
        modes.append(ModeSpec(setpoints=setpoints, gain=1.0 + 0.25 * (m - (n_modes - 1) / 2)))
    magnitudes = {"step": 0.5, "random_variation": 0.3, "drift": 1.5e-4, "sticking": 0.0}
    faults = [FaultSpec(type=FAULT_TYPES[g % 4], group=g,
                        magnitude=magnitudes[FAULT_TYPES[g % 4]])
              for g in range(n_groups)]
    return GeneratorConfig(modes=modes, faults=faults, seed=seed)


def _simulate_run(config: GeneratorConfig, mode_idx: int, fault: FaultSpec | None,
                  rng: np.random.Generator) -> np.ndarray:
    """One closed-loop trajectory; returns the (segment_len, 2*G) recording."""
    mode = config.modes[mode_idx]
    groups = config.n_groups
    T = config.segment_len
    t_inj = math.floor(T * config.injection_frac)
    kp = _KP * mode.gain
    ki = _KI * mode.gain

    noise = rng.normal(0.0, config.noise_std, size=(T, groups))
    extra = None
    if fault is not None and fault.type == "random_variation":
        extra = rng.uniform(-fault.magnitude, fault.magnitude, size=T - t_inj)

    y_prev = np.zeros(groups)   # deviation from setpoint
    y_prev2 = np.zeros(groups)
    integ = np.zeros(groups)
    u = np.zeros(groups)
    out = np.empty((T, 2 * groups))
    setpoints = np.asarray(mode.setpoints)
    u_offsets = 0.4 * setpoints   # mode-specific actuator operating point

    stuck_value: float | None = None
    for t in range(T):
        d = np.zeros(groups)
        if fault is not None and t >= t_inj:
            g = fault.group
            if fault.type == "step":
                d[g] += fault.magnitude
            elif fault.type == "random_variation":
                d[g] += extra[t - t_inj]
            elif fault.type == "drift":
                d[g] += fault.magnitude * (t - t_inj)
        y = _PLANT_A1 * y_prev + _PLANT_A2 * y_prev2 + _PLANT_B0 * u + d + noise[t]
        err = -y
        integ = integ + err
        u = np.clip(kp * err + ki * integ, -_U_LIMIT, _U_LIMIT)
        if fault is not None and fault.type == "sticking" and t >= t_inj:
            if stuck_value is None:
                stuck_value = out[t - 1, 2 * fault.group + 1] - u_offsets[fault.group] \
                    if t > 0 else 0.0
            u[fault.group] = stuck_value
        out[t, 0::2] = setpoints + y
        out[t, 1::2] = u_offsets + u
        y_prev2 = y_prev
        y_prev = y
    return out


def synth_generate(config: GeneratorConfig, mode_idx: int,
                   condition: int) -> RawSeries:
    """Simulate one (mode, condition) run; condition 0 is fault-free and
    condition c >= 1 injects fault archetype c-1 at the injection point.
    Deterministic for a given (config seed, mode, condition)."""
    if not 0 <= mode_idx < len(config.modes):
        raise ValueError(f"mode index {mode_idx} out of range")
    if not 0 <= condition < config.n_classes:
        raise ValueError(f"condition {condition} out of range for L={config.n_classes}")
    fault = None if condition == 0 else config.faults[condition - 1]
    rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, mode_idx, condition]))
    data = _simulate_run(config, mode_idx, fault, rng)
    T = config.segment_len
    t_inj = math.floor(T * config.injection_frac)
    labels = np.zeros(T, dtype=np.int64)
    if condition > 0:
        labels[t_inj:] = condition
    names = []
    for g in range(config.n_groups):
        names += [f"pv{g + 1}", f"act{g + 1}"]
    return RawSeries(
        variables=data,
        labels=labels,
        mode_tags=np.full(T, mode_idx, dtype=np.int64),
        var_names=tuple(names),
    )


def generate_all_runs(config: GeneratorConfig) -> Iterable[tuple[int, int, RawSeries]]:
    """All (mode, condition) runs of the configured process, in order."""
    for m in range(len(config.modes)):
        for c in range(config.n_classes):
            yield m, c, synth_generate(config, m, c)
