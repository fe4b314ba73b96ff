"""Synthetic glioma phantom cohorts with planted phenotype/genotype correlations.

Each phantom is a deformed ellipsoidal tumour with three nested compartments
(necrotic core, enhancing rim, surrounding edema) placed inside an
ellipsoidal brain that lives in the space of the box atlas. Class-dependent
knobs in :class:`PhantomSpec` control the signals a classifier can pick up:

* IDH status -> T1c rim enhancement, rim irregularity, age at diagnosis
* 1p/19q status -> frontal placement, texture heterogeneity of the core
* WHO 2016 subtype -> median overall survival

None of the effect sizes come from real data; they are free parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage, special

from . import atlas
from .errors import ConfigError, StratificationError
from .survival import try_subtype

TASK_MODALITIES = {"IDH": ("T1c", "T2", "FLAIR"), "1p19q": ("T1c", "T2")}
TASK_LABEL = {"IDH": "idh", "1p19q": "codel"}
# class1 is the positive class of each task
TASK_CLASSES = {"IDH": ("wt", "mut"), "1p19q": ("non-codeleted", "codeleted")}

IDH_VALUES = ("mut", "wt", "unknown")
CODEL_VALUES = ("codeleted", "non-codeleted", "unknown")
GRADE_VALUES = ("II", "III", "IV", "unknown")
SEX_VALUES = ("F", "M")
EVENT_VALUES = ("death-observed", "censored")

MASK_EDEMA, MASK_CORE, MASK_ENHANCING = 1, 2, 3


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 8:
            raise ConfigError(f"volume must be 3-D with every axis >= 8, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ConfigError("volume contains non-finite intensities")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class CaseRecord:
    case_id: str
    task: str
    modalities: dict[str, Volume]
    mask: np.ndarray
    brain: np.ndarray
    age_years: float
    sex: str
    grade: str
    idh: str
    codel: str
    os_months: float | None = None
    event: str | None = None

    def label(self, task: str | None = None) -> str:
        """Task label as class0/class1 (or 'unknown')."""
        task = task or self.task
        value = getattr(self, TASK_LABEL[task])
        if value == "unknown":
            return "unknown"
        return f"class{TASK_CLASSES[task].index(value)}"

    def metadata(self) -> dict:
        return {k: getattr(self, k) for k in
                ("case_id", "task", "age_years", "sex", "grade", "idh", "codel", "os_months", "event")}

    def equals(self, other: "CaseRecord") -> bool:
        if self.metadata() != other.metadata() or self.modalities.keys() != other.modalities.keys():
            return False
        same = all(np.array_equal(self.modalities[k].data, other.modalities[k].data)
                   and tuple(self.modalities[k].spacing) == tuple(other.modalities[k].spacing)
                   for k in self.modalities)
        return same and np.array_equal(self.mask, other.mask) and np.array_equal(self.brain, other.brain)


def _default_os_median():
    return {"oligodendroglioma": 47.6, "IDH-mut astrocytoma": 47.6, "IDH-mut glioblastoma": 47.6,
            "IDH-wt astrocytoma": 16.94, "IDH-wt glioblastoma": 16.94}


@dataclass(frozen=True)
class PhantomSpec:
    """Generator parameters. Radii are in voxels; per-class dicts are keyed by label value."""

    shape: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)
    radius_range: tuple[float, float] = (5.0, 8.0)
    rim_fraction: float = 0.4
    edema_fraction: float = 0.45
    irregularity: Mapping[str, float] = field(default_factory=lambda: {"mut": 0.08, "wt": 0.30})
    rim_enhancement: Mapping[str, tuple[float, float]] = field(
        default_factory=lambda: {"mut": (0.60, 0.35), "wt": (0.85, 0.35)})
    age: Mapping[str, tuple[float, float]] = field(
        default_factory=lambda: {"mut": (42.0, 10.0), "wt": (62.0, 10.0)})
    frontal_prob: Mapping[str, float] = field(
        default_factory=lambda: {"codeleted": 0.85, "non-codeleted": 0.15})
    texture: Mapping[str, float] = field(
        default_factory=lambda: {"codeleted": 0.15, "non-codeleted": 0.10})
    os_median: Mapping[str, float] = field(default_factory=_default_os_median)
    censor_prob: float = 0.25
    noise_sigma: float = 0.08
    # label sampling used by generate_cohort
    grade_probs: Mapping[str, tuple[float, float, float]] = field(
        default_factory=lambda: {"mut": (0.45, 0.40, 0.15), "wt": (0.10, 0.15, 0.75)})
    codel_given_mut: float = 0.4
    mut_given_noncodel: float = 0.75

    def validate(self) -> None:
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise ConfigError(f"shape must have three axes >= 8, got {self.shape}")
        lo, hi = self.radius_range
        if not (0 < lo < hi):
            raise ConfigError(f"radius_range must satisfy 0 < lo < hi, got {self.radius_range}")
        for name in ("rim_fraction", "edema_fraction", "censor_prob", "codel_given_mut",
                     "mut_given_noncodel"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 < self.rim_fraction < 1.0:
            raise ConfigError("rim_fraction must leave a nonempty necrotic core and rim")
        for k, p in self.frontal_prob.items():
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"frontal_prob[{k}] must lie in [0, 1], got {p}")
        for k, probs in self.grade_probs.items():
            if abs(sum(probs) - 1.0) > 1e-9 or min(probs) < 0:
                raise ConfigError(f"grade_probs[{k}] must be a probability vector")
        for k, a in self.irregularity.items():
            if not 0.0 <= a < 1.0:
                raise ConfigError(f"irregularity[{k}] must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not np.any(self._center_candidates()):
            raise ConfigError("largest tumour does not fit inside the volume with a 2-voxel margin "
                              "while keeping its core inside the brain")

    def max_core_extent(self) -> float:
        a = max(self.irregularity.values(), default=0.0)
        return self.radius_range[1] * (1.0 + a)

    def max_extent(self) -> float:
        return self.max_core_extent() * (1.0 + self.edema_fraction)

    def _center_candidates(self) -> np.ndarray:
        return _center_candidates(tuple(self.shape), self.max_core_extent(), self.max_extent())

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Mapping):
                v = {k: list(x) if isinstance(x, tuple) else x for k, x in v.items()}
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "PhantomSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown PhantomSpec field(s): {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if isinstance(v, list):
                v = tuple(v)
            elif isinstance(v, Mapping):
                v = {kk: tuple(vv) if isinstance(vv, list) else vv for kk, vv in v.items()}
            kw[k] = v
        return cls(**kw)


_CANDIDATE_CACHE: dict = {}


def _center_candidates(shape, core_extent, extent) -> np.ndarray:
    """Centres keeping the core inside the brain and the whole tumour 2 voxels off the volume edge."""
    key = (shape, round(core_extent, 6), round(extent, 6))
    if key not in _CANDIDATE_CACHE:
        brain = atlas.brain_mask(shape)
        dist = ndimage.distance_transform_edt(brain)
        ok = dist >= core_extent + 1.0
        for ax, n in enumerate(shape):
            coord = np.arange(n).reshape([-1 if a == ax else 1 for a in range(3)])
            ok &= (coord - extent >= 2.0) & (coord + extent <= n - 1 - 2.0)
        _CANDIDATE_CACHE[key] = ok
    return _CANDIDATE_CACHE[key]


def _region_core(shape, region: int, inside: bool) -> np.ndarray:
    """Voxels whose 5x5x5 neighbourhood is entirely inside (or outside) a region."""
    lab = atlas.atlas_labels(shape) == region
    if not inside:
        lab = ~lab
    return ndimage.binary_erosion(lab, structure=np.ones((5, 5, 5), bool), border_value=1)


def _sh_field(dirs_theta, dirs_phi, rng, lmax=4) -> np.ndarray:
    """Random low-order spherical-harmonic surface perturbation, scaled to max |f| = 1."""
    f = np.zeros(dirs_theta.shape)
    for l in range(2, lmax + 1):
        for m in range(-l, l + 1):
            c = rng.normal() + 1j * rng.normal()
            f += np.real(c * _sph_harm(l, m, dirs_theta, dirs_phi))
    peak = np.abs(f).max()
    return f / peak if peak > 0 else f


def _sph_harm(l, m, theta, phi):
    # theta polar, phi azimuth
    if hasattr(special, "sph_harm_y"):
        return special.sph_harm_y(l, m, theta, phi)
    return special.sph_harm(m, l, phi, theta)


def _smooth_noise(shape, rng, sigma=1.5) -> np.ndarray:
    g = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    sd = g.std()
    return g / sd if sd > 0 else g


def generate_case(spec: PhantomSpec, labels: Mapping[str, str], seed: int,
                  task: str = "IDH", case_id: str | None = None) -> CaseRecord:
    """Draw one phantom. Output depends only on (spec, labels, seed, task)."""
    if seed < 0:
        raise ConfigError("seed must be >= 0")
    if task not in TASK_MODALITIES:
        raise ConfigError(f"unknown task {task!r}")
    spec.validate()
    idh = labels.get("idh", "unknown")
    codel = labels.get("codel", "unknown")
    grade = labels.get("grade", "unknown")
    _check_token("idh", idh, IDH_VALUES)
    _check_token("codel", codel, CODEL_VALUES)
    _check_token("grade", grade, GRADE_VALUES)

    rng = np.random.default_rng(seed)
    shape = tuple(spec.shape)
    idh_key = idh if idh in spec.irregularity else "wt"
    codel_key = codel if codel in spec.frontal_prob else None

    # placement
    p_front = (spec.frontal_prob[codel_key] if codel_key
               else float(np.mean(list(spec.frontal_prob.values()))))
    frontal = bool(rng.random() < p_front)
    cand = spec._center_candidates() & _region_core(shape, atlas.REGIONS.index("frontal"), frontal)
    if not cand.any():
        cand = spec._center_candidates()
    idx = np.flatnonzero(cand)
    center = np.array(np.unravel_index(idx[rng.integers(len(idx))], shape), dtype=float)
    center += rng.uniform(-0.5, 0.5, size=3)

    radius = rng.uniform(*spec.radius_range)
    amp = spec.irregularity[idh_key]
    extent = spec.max_extent() + 1.0

    lo = np.maximum(np.floor(center - extent).astype(int), 0)
    hi = np.minimum(np.ceil(center + extent).astype(int) + 1, shape)
    zz, yy, xx = np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij")
    dz, dy, dx = zz - center[0], yy - center[1], xx - center[2]
    dist = np.sqrt(dz ** 2 + dy ** 2 + dx ** 2)
    theta = np.arccos(np.clip(dz / np.maximum(dist, 1e-9), -1, 1))
    phi = np.arctan2(dy, dx)
    surface = radius * (1.0 + amp * _sh_field(theta, phi, rng))
    rho = dist / surface

    local = np.zeros(dist.shape, np.uint8)
    local[rho <= 1.0 + spec.edema_fraction] = MASK_EDEMA
    local[rho <= 1.0] = MASK_ENHANCING
    local[rho < 1.0 - spec.rim_fraction] = MASK_CORE
    mask = np.zeros(shape, np.uint8)
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    mask[sl] = local
    brain = atlas.brain_mask(shape)
    mask[~brain] = 0
    if not np.isin(mask, (MASK_CORE, MASK_ENHANCING)).any():
        # only reachable for pathological specs; keep the core-nonempty contract
        c = tuple(int(round(v)) for v in center)
        mask[c] = MASK_ENHANCING

    enh_mean, enh_sd = spec.rim_enhancement[idh_key]
    enhancement = rng.normal(enh_mean, enh_sd)
    texture_amp = spec.texture.get(codel, float(np.mean(list(spec.texture.values()))))
    texture = 1.0 + texture_amp * _smooth_noise(shape, rng, 1.0)
    bias = 1.0 + 0.05 * _smooth_noise(shape, rng, 6.0)

    tissue = {
        #        brain, edema, necrotic core, enhancing rim
        "T1c": (1.0, 0.80, 0.45, 1.0 + enhancement),
        "T2": (1.0, 1.75, 2.10, 1.45),
        "FLAIR": (1.0, 1.85, 0.95, 1.50),
    }
    modalities = {}
    core = np.isin(mask, (MASK_CORE, MASK_ENHANCING))
    for name in TASK_MODALITIES[task]:
        vals = np.asarray(tissue[name])
        img = np.where(brain, vals[0], 0.0)
        for code in (MASK_EDEMA, MASK_CORE, MASK_ENHANCING):
            img = np.where(mask == code, vals[code], img)
        img = np.where(core, img * texture, img) * bias
        img = img + spec.noise_sigma * rng.standard_normal(shape)
        img = np.where(brain, img, 0.0)
        modalities[name] = Volume(img.astype(np.float32), tuple(spec.spacing))

    age_mu, age_sd = spec.age[idh_key]
    age = float(max(0.0, rng.normal(age_mu, age_sd)))
    sex = SEX_VALUES[int(rng.integers(2))]

    subtype = try_subtype(idh, codel, grade)
    median = spec.os_median.get(subtype) if subtype else None
    if median is None:
        median = float(np.mean(list(spec.os_median.values())))
    os_true = rng.exponential(median / math.log(2.0))
    if rng.random() < spec.censor_prob:
        os_months, event = float(os_true * rng.random()), "censored"
    else:
        os_months, event = float(os_true), "death-observed"

    return CaseRecord(
        case_id=case_id or f"case-{seed}",
        task=task,
        modalities=modalities,
        mask=mask,
        brain=brain.copy(),
        age_years=round(age, 2),
        sex=sex,
        grade=grade,
        idh=idh,
        codel=codel,
        os_months=round(os_months, 3),
        event=event,
    )


def _check_token(name, value, allowed):
    if value not in allowed:
        raise ConfigError(f"invalid {name} label {value!r}; expected one of {allowed}")


def largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    """Integer apportionment of ``total`` by fractions; ties go to the earlier entry."""
    raw = [total * f for f in fractions]
    base = [int(math.floor(r + 1e-12)) for r in raw]
    rest = total - sum(base)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:rest]:
        base[i] += 1
    return base


def _label_fractions(class_fractions: Mapping[str, float]):
    keys = set(class_fractions)
    if keys <= set(IDH_VALUES[:2]):
        return "idh", "IDH"
    if keys <= set(CODEL_VALUES[:2]):
        return "codel", "1p19q"
    raise ConfigError(f"class fractions must be keyed by IDH or 1p/19q labels, got {sorted(keys)}")


def sample_labels(spec: PhantomSpec, label_name: str, value: str, rng) -> dict[str, str]:
    """Fill in the remaining labels given the stratification label, respecting WHO 2016 logic."""
    if label_name == "idh":
        idh = value
        if idh == "mut":
            codel = "codeleted" if rng.random() < spec.codel_given_mut else "non-codeleted"
        else:
            codel = "non-codeleted"
    else:
        codel = value
        if codel == "codeleted":
            idh = "mut"
        else:
            idh = "mut" if rng.random() < spec.mut_given_noncodel else "wt"
    probs = np.asarray(spec.grade_probs[idh], dtype=float)
    if codel == "codeleted":
        probs = probs[:2] / probs[:2].sum()
        probs = np.r_[probs, 0.0]
    grade = GRADE_VALUES[int(rng.choice(3, p=probs))]
    return {"idh": idh, "codel": codel, "grade": grade}


def generate_cohort(spec: PhantomSpec, class_fractions: Mapping[str, float], n: int,
                    seed: int, task: str | None = None) -> list[CaseRecord]:
    """Cohort of ``n`` phantoms with exact (rounded) class counts.

    Per-case seeds are spawned from ``seed``; the case order is shuffled
    deterministically.
    """
    if n < 1:
        raise ConfigError("cohort size must be >= 1")
    if abs(sum(class_fractions.values()) - 1.0) > 1e-9:
        raise ConfigError("class fractions must sum to 1")
    label_name, inferred_task = _label_fractions(class_fractions)
    task = task or inferred_task
    if TASK_LABEL[task] != label_name:
        raise ConfigError(f"task {task} stratifies on {TASK_LABEL[task]}, not {label_name}")
    spec.validate()
    keys = sorted(class_fractions)
    counts = largest_remainder(n, [class_fractions[k] for k in keys])
    values = [k for k, c in zip(keys, counts) for _ in range(c)]
    master = np.random.default_rng(seed)
    master.shuffle(values)
    children = np.random.SeedSequence(seed).spawn(n)
    cases = []
    for i, (value, child) in enumerate(zip(values, children)):
        label_seed, case_seed = child.generate_state(2)
        labels = sample_labels(spec, label_name, value, np.random.default_rng(int(label_seed)))
        cases.append(generate_case(spec, labels, int(case_seed), task=task, case_id=f"case{i:04d}"))
    return cases


def stratified_assign(labels: Sequence[str], fractions: Sequence[float], seed: int) -> list[int]:
    """Assign each item to a group so that group sizes and per-class counts are both rounded shares.

    Group sizes are apportioned first; classes are then apportioned group by
    group against the remaining capacity, which keeps every per-class count
    within one of size_g * prevalence_c for two-class labels.
    """
    n = len(labels)
    sizes = largest_remainder(n, fractions)
    classes = sorted(set(labels))
    by_class = {c: [i for i, l in enumerate(labels) if l == c] for c in classes}
    rng = np.random.default_rng(seed)
    for c in classes:
        rng.shuffle(by_class[c])
    remaining = list(sizes)
    out = [-1] * n
    for ci, c in enumerate(classes):
        members = by_class[c]
        if ci == len(classes) - 1:
            alloc = list(remaining)
        else:
            alloc = _capped_apportion(len(members), sizes, remaining, n)
        pos = 0
        for g, k in enumerate(alloc):
            for i in members[pos:pos + k]:
                out[i] = g
            pos += k
            remaining[g] -= k
    return out


def _capped_apportion(count, sizes, capacity, n):
    targets = [count * s / n for s in sizes]
    base = [min(int(math.floor(t + 1e-12)), cap) for t, cap in zip(targets, capacity)]
    rest = count - sum(base)
    order = sorted(range(len(sizes)), key=lambda g: (-(targets[g] - base[g]), g))
    while rest > 0:
        progressed = False
        for g in order:
            if rest and base[g] < capacity[g]:
                base[g] += 1
                rest -= 1
                progressed = True
        if not progressed:
            raise StratificationError("cannot apportion class across groups")
    return base


SPLITS = ("train", "internal", "external_a", "external_b")


@dataclass
class SplitAssignment:
    assignment: dict[str, str]

    def cases(self, split: str) -> list[str]:
        return [cid for cid, s in self.assignment.items() if s == split]

    def to_dict(self) -> dict:
        return {s: self.cases(s) for s in SPLITS}


def split_cohort(cases: Sequence[CaseRecord], fractions: Mapping[str, float],
                 stratify_on: str = "idh", seed: int = 0) -> SplitAssignment:
    """Disjoint stratified train/internal/external_a/external_b split."""
    fr = [float(fractions.get(s, 0.0)) for s in SPLITS]
    if set(fractions) - set(SPLITS):
        raise ConfigError(f"unknown split names: {sorted(set(fractions) - set(SPLITS))}")
    if abs(sum(fr) - 1.0) > 1e-9 or min(fr) < 0:
        raise ConfigError("split fractions must be nonnegative and sum to 1")
    labels = []
    for c in cases:
        v = getattr(c, stratify_on)
        if v in (None, "unknown"):
            raise StratificationError(f"{c.case_id} lacks the stratification label {stratify_on}")
        labels.append(v)
    n_splits = sum(1 for f in fr if f > 0)
    for v in set(labels):
        if labels.count(v) < n_splits:
            raise StratificationError(
                f"class {v!r} has {labels.count(v)} case(s), fewer than {n_splits} splits")
    groups = stratified_assign(labels, fr, seed)
    return SplitAssignment({c.case_id: SPLITS[g] for c, g in zip(cases, groups)})


def crack_perimeter(region: np.ndarray) -> int:
    """Number of unit pixel edges separating the region from its complement."""
    r = np.pad(region.astype(bool), 1)
    return int(np.sum(r[1:, :] != r[:-1, :]) + np.sum(r[:, 1:] != r[:, :-1]))


def rim_irregularity(mask: np.ndarray) -> float:
    """perimeter^2 / area of the enhancing rim on the axial slice with the largest tumour core."""
    core = np.isin(mask, (MASK_CORE, MASK_ENHANCING))
    n = int(np.argmax(core.sum(axis=(1, 2))))
    rim = mask[n] == MASK_ENHANCING
    area = int(rim.sum())
    if area == 0:
        return 0.0
    return crack_perimeter(rim) ** 2 / area


def with_overrides(spec: PhantomSpec, **kw) -> PhantomSpec:
    return replace(spec, **kw)
