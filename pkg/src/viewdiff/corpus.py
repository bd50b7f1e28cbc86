"""Synthetic multi-view longitudinal cohorts.

Records carry three per-visit code-set views (diagnosis, procedure,
medication). Each visit draws a latent class from a sticky Markov chain;
each view's code set is a noisy copy of that class's fixed template, and
the labels (phenotype set, length-of-stay bucket) derive from the class.
At template fidelity 1.0 the procedure/medication codes are an exact
function of the diagnosis codes, which gives imputation an analytic
oracle; at fidelity 0.0 views are independent uniform noise.

Cohorts persist to JSONL: one header line, then one patient per line.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DomainError, ParseError, ValidationError
from .rng import substream

VIEWS = ("diagnosis", "procedure", "medication")
VIEW_KEYS = ("d", "p", "m")
N_VIEWS = 3
N_LOS_CLASSES = 10
COHORT_SCHEMA = 1

MISSING_GROUPS = ("G1", "G2", "G3", "G4")


@dataclass(frozen=True)
class CodeVocab:
    view_id: str
    size: int

    def __post_init__(self):
        if self.view_id not in VIEWS:
            raise ConfigError(f"view_id: unknown view {self.view_id!r}")
        if self.size < 1:
            raise ConfigError(f"size: vocab for {self.view_id} must be >= 1")

    @property
    def names(self) -> tuple[str, ...]:
        prefix = {"diagnosis": "DX", "procedure": "PR", "medication": "RX"}[self.view_id]
        return tuple(f"{prefix}{i:04d}" for i in range(self.size))


@dataclass(frozen=True)
class Visit:
    codes: tuple[tuple[int, ...], ...]        # one sorted tuple per view
    observed: tuple[bool, bool, bool]
    phenotypes: tuple[int, ...]
    los_class: int
    imputed: tuple[int, ...] = ()             # view indices filled by imputation


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple[Visit, ...]


@dataclass(frozen=True)
class CohortConfig:
    n_patients: int = 200
    visits_min: int = 1
    visits_max: int = 6
    vocab_sizes: tuple[int, int, int] = (64, 48, 56)
    n_classes: int = 8
    codes_min: int = 2
    codes_max: int = 4
    coupling: float = 1.0
    label_noise: float = 0.0
    n_phenotypes: int = 12
    phenotypes_per_class: int = 2
    class_stickiness: float = 0.8
    # Optional per-view template fidelity; None means use `coupling` for all
    # views. Asymmetric fidelities create a dominant (more label-informative)
    # view, used by the view-laziness experiments.
    view_fidelity: tuple[float, float, float] | None = None

    def fidelity(self, view: int) -> float:
        return self.coupling if self.view_fidelity is None else self.view_fidelity[view]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["vocab_sizes"] = list(self.vocab_sizes)
        if self.view_fidelity is not None:
            d["view_fidelity"] = list(self.view_fidelity)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CohortConfig":
        kw = dict(d)
        kw["vocab_sizes"] = tuple(kw["vocab_sizes"])
        if kw.get("view_fidelity") is not None:
            kw["view_fidelity"] = tuple(kw["view_fidelity"])
        return cls(**kw)


@dataclass(frozen=True)
class Cohort:
    vocab_sizes: tuple[int, int, int]
    n_phenotypes: int
    seed: int
    config: CohortConfig | None
    records: tuple[PatientRecord, ...]

    @property
    def vocabs(self) -> tuple[CodeVocab, ...]:
        return tuple(CodeVocab(v, s) for v, s in zip(VIEWS, self.vocab_sizes))

    def n_visits(self) -> int:
        return sum(len(r.visits) for r in self.records)

    def replace_records(self, records: Sequence[PatientRecord]) -> "Cohort":
        return dataclasses.replace(self, records=tuple(records))


def validate_config(config: CohortConfig) -> None:
    if config.n_patients < 0:
        raise ConfigError("n_patients: must be >= 0")
    if not (1 <= config.visits_min <= config.visits_max):
        raise ConfigError("visits_min/visits_max: need 1 <= min <= max")
    if len(config.vocab_sizes) != N_VIEWS:
        raise ConfigError("vocab_sizes: need one size per view")
    if not (1 <= config.codes_min <= config.codes_max):
        raise ConfigError("codes_min/codes_max: need 1 <= min <= max")
    if config.n_classes < 1:
        raise ConfigError("n_classes: must be >= 1")
    for k, size in enumerate(config.vocab_sizes):
        if size < config.n_classes * config.codes_max:
            raise ConfigError(
                f"vocab_sizes[{k}]: {size} too small for {config.n_classes} disjoint "
                f"class templates of up to {config.codes_max} codes")
    if not 0.0 <= config.coupling <= 1.0:
        raise ConfigError("coupling: must lie in [0, 1]")
    if not 0.0 <= config.label_noise <= 1.0:
        raise ConfigError("label_noise: must lie in [0, 1]")
    if config.phenotypes_per_class < 1 or config.n_phenotypes < config.phenotypes_per_class:
        raise ConfigError("n_phenotypes: must cover phenotypes_per_class")
    if not 0.0 <= config.class_stickiness <= 1.0:
        raise ConfigError("class_stickiness: must lie in [0, 1]")
    if config.view_fidelity is not None:
        if len(config.view_fidelity) != N_VIEWS:
            raise ConfigError("view_fidelity: need one value per view")
        for f in config.view_fidelity:
            if not 0.0 <= f <= 1.0:
                raise ConfigError("view_fidelity: values must lie in [0, 1]")


def validate_visit(visit: Visit, vocab_sizes: Sequence[int], n_phenotypes: int,
                   where: str) -> None:
    if not any(visit.observed):
        raise ValidationError(f"{where}: no observed view")
    for k in range(N_VIEWS):
        codes = visit.codes[k]
        if visit.observed[k] and not codes:
            raise ValidationError(f"{where}: observed view {VIEW_KEYS[k]} has no codes")
        if not visit.observed[k] and codes and k not in visit.imputed:
            raise ValidationError(f"{where}: missing view {VIEW_KEYS[k]} carries codes")
        for c in codes:
            if not 0 <= c < vocab_sizes[k]:
                raise ValidationError(
                    f"{where}: code {c} out of range for view {VIEW_KEYS[k]} "
                    f"(vocab size {vocab_sizes[k]})")
    if not 0 <= visit.los_class < N_LOS_CLASSES:
        raise ValidationError(f"{where}: los_class {visit.los_class} outside [0, 9]")
    for g in visit.phenotypes:
        if not 0 <= g < n_phenotypes:
            raise ValidationError(f"{where}: phenotype {g} out of range")


def validate_cohort(cohort: Cohort) -> None:
    for rec in cohort.records:
        if not rec.visits:
            raise ValidationError(f"patient {rec.patient_id}: no visits")
        for j, v in enumerate(rec.visits):
            validate_visit(v, cohort.vocab_sizes, cohort.n_phenotypes,
                           f"patient {rec.patient_id} visit {j}")


# ---------------------------------------------------------------------------
# generation


def planted_templates(config: CohortConfig, seed: int) -> list[list[tuple[int, ...]]]:
    """Per-view, per-class code templates (disjoint blocks within each view).

    Deterministic in (config, seed); generation and tests both derive the
    planted cross-view mapping from this function.
    """
    rng = substream(seed, "corpus.templates")
    templates: list[list[tuple[int, ...]]] = []
    for k in range(N_VIEWS):
        block = config.vocab_sizes[k] // config.n_classes
        per_view = []
        for cls in range(config.n_classes):
            size = int(rng.integers(config.codes_min, config.codes_max + 1))
            offsets = rng.choice(block, size=size, replace=False)
            per_view.append(tuple(sorted(cls * block + int(o) for o in offsets)))
        templates.append(per_view)
    return templates


def class_phenotypes(config: CohortConfig, cls: int) -> tuple[int, ...]:
    base = cls * config.phenotypes_per_class
    return tuple(sorted({(base + i) % config.n_phenotypes
                         for i in range(config.phenotypes_per_class)}))


def class_los(config: CohortConfig, cls: int) -> int:
    if config.n_classes == 1:
        return 0
    return round(cls * (N_LOS_CLASSES - 1) / (config.n_classes - 1))


def _draw_view_codes(rng: np.random.Generator, template: tuple[int, ...],
                     fidelity: float, vocab_size: int) -> tuple[int, ...]:
    codes: set[int] = set()
    for code in template:
        if fidelity >= 1.0 or rng.random() < fidelity:
            codes.add(code)
        else:
            r = int(rng.integers(vocab_size))
            while r in codes:
                r = int(rng.integers(vocab_size))
            codes.add(r)
    return tuple(sorted(codes))


def generate_cohort(config: CohortConfig, seed: int) -> Cohort:
    """Deterministic synthetic cohort; all views observed."""
    validate_config(config)
    templates = planted_templates(config, seed)
    rng = substream(seed, "corpus.generate")
    records = []
    for i in range(config.n_patients):
        n_visits = int(rng.integers(config.visits_min, config.visits_max + 1))
        cls = int(rng.integers(config.n_classes))
        visits = []
        for _ in range(n_visits):
            codes = tuple(
                _draw_view_codes(rng, templates[k][cls], config.fidelity(k),
                                 config.vocab_sizes[k])
                for k in range(N_VIEWS))
            phe = set(class_phenotypes(config, cls))
            los = class_los(config, cls)
            if config.label_noise > 0.0:
                for g in range(config.n_phenotypes):
                    if rng.random() < config.label_noise:
                        phe.symmetric_difference_update({g})
                if rng.random() < config.label_noise:
                    los = int(rng.integers(N_LOS_CLASSES))
            visits.append(Visit(codes=codes, observed=(True, True, True),
                                phenotypes=tuple(sorted(phe)), los_class=los))
            # advance the class chain for the next visit
            if config.n_classes > 1 and rng.random() >= config.class_stickiness:
                step = int(rng.integers(config.n_classes - 1))
                cls = step if step < cls else step + 1
        records.append(PatientRecord(patient_id=f"p{i:05d}", visits=tuple(visits)))
    cohort = Cohort(vocab_sizes=tuple(config.vocab_sizes),
                    n_phenotypes=config.n_phenotypes, seed=seed, config=config,
                    records=tuple(records))
    validate_cohort(cohort)
    return cohort


# ---------------------------------------------------------------------------
# masking / splitting


def apply_missingness(cohort: Cohort, per_view_rate: float, seed: int) -> Cohort:
    """MCAR per-view masking with rejection so every visit keeps >= 1 view."""
    if not 0.0 <= per_view_rate < 1.0:
        raise DomainError(f"per_view_rate must lie in [0, 1), got {per_view_rate}")
    if per_view_rate == 0.0:
        return cohort
    rng = substream(seed, "corpus.missing")
    records = []
    for rec in cohort.records:
        visits = []
        for visit in rec.visits:
            obs_idx = [k for k in range(N_VIEWS) if visit.observed[k]]
            while True:
                flips = rng.random(len(obs_idx)) < per_view_rate
                if not flips.all():
                    break
            codes = list(visit.codes)
            observed = list(visit.observed)
            for k, flip in zip(obs_idx, flips):
                if flip:
                    observed[k] = False
                    codes[k] = ()
            visits.append(dataclasses.replace(visit, codes=tuple(codes),
                                              observed=tuple(observed)))
        records.append(dataclasses.replace(rec, visits=tuple(visits)))
    return cohort.replace_records(records)


def split_cohort(cohort: Cohort, seed: int) -> tuple[Cohort, Cohort, Cohort]:
    """Patient-level 6:2:2 split: floor(0.6 N) / floor(0.2 N) / remainder."""
    n = len(cohort.records)
    if n < 5:
        raise DomainError(f"split needs >= 5 patients, got {n}")
    perm = substream(seed, "corpus.split").permutation(n)
    n_train = int(0.6 * n)
    n_val = int(0.2 * n)
    order = [cohort.records[i] for i in perm]
    return (cohort.replace_records(order[:n_train]),
            cohort.replace_records(order[n_train:n_train + n_val]),
            cohort.replace_records(order[n_train + n_val:]))


# ---------------------------------------------------------------------------
# persistence (JSONL; one header line, then one patient per line)


def _visit_to_dict(visit: Visit) -> dict:
    d = {
        "d": list(visit.codes[0]),
        "p": list(visit.codes[1]),
        "m": list(visit.codes[2]),
        "obs": list(visit.observed),
        "phe": list(visit.phenotypes),
        "los": visit.los_class,
    }
    if visit.imputed:
        d["imputed"] = [VIEW_KEYS[k] for k in visit.imputed]
    return d


def _visit_from_dict(d: dict, where: str) -> Visit:
    try:
        imputed = tuple(sorted(VIEW_KEYS.index(k) for k in d.get("imputed", [])))
        return Visit(
            codes=tuple(tuple(sorted(int(c) for c in d[k])) for k in VIEW_KEYS),
            observed=tuple(bool(b) for b in d["obs"]),
            phenotypes=tuple(sorted(int(g) for g in d["phe"])),
            los_class=int(d["los"]),
            imputed=imputed,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{where}: malformed visit record ({exc})") from exc


def persist_cohort(cohort: Cohort, path: str | Path) -> None:
    path = Path(path)
    header = {
        "cohort_schema": COHORT_SCHEMA,
        "vocab_sizes": list(cohort.vocab_sizes),
        "n_phenotypes": cohort.n_phenotypes,
        "seed": cohort.seed,
        "config": cohort.config.to_dict() if cohort.config else None,
    }
    lines = [json.dumps(header, separators=(",", ":"))]
    for rec in cohort.records:
        lines.append(json.dumps(
            {"id": rec.patient_id, "visits": [_visit_to_dict(v) for v in rec.visits]},
            separators=(",", ":")))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_cohort(path: str | Path) -> Cohort:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read cohort file {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file (schema header required)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:1: bad header ({exc})") from exc
    if not isinstance(header, dict) or header.get("cohort_schema") != COHORT_SCHEMA:
        raise ParseError(f"{path}:1: missing or unsupported cohort_schema")
    try:
        vocab_sizes = tuple(int(v) for v in header["vocab_sizes"])
        n_phe = int(header["n_phenotypes"])
        seed = int(header["seed"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}:1: bad header field ({exc})") from exc
    config = None
    if header.get("config") is not None:
        try:
            config = CohortConfig.from_dict(header["config"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}:1: bad config snapshot ({exc})") from exc

    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{lineno}: malformed line ({exc})") from exc
        where = f"{path}:{lineno}"
        try:
            pid = str(obj["id"])
            visit_dicts = obj["visits"]
        except (KeyError, TypeError) as exc:
            raise ParseError(f"{where}: malformed patient record ({exc})") from exc
        visits = tuple(_visit_from_dict(v, where) for v in visit_dicts)
        rec = PatientRecord(patient_id=pid, visits=visits)
        if not visits:
            raise ValidationError(f"{where}: patient {pid} has no visits")
        for j, v in enumerate(visits):
            validate_visit(v, vocab_sizes, n_phe, f"patient {pid} visit {j}")
        records.append(rec)
    return Cohort(vocab_sizes=vocab_sizes, n_phenotypes=n_phe, seed=seed,
                  config=config, records=tuple(records))


# ---------------------------------------------------------------------------
# grouping


def group_of_ratio(n_missing: int, n_total: int) -> str:
    """Map a missing ratio (as an exact fraction) to G1..G4.

    Bins: G1 (1/2, 2/3], G2 (1/3, 1/2], G3 (1/6, 1/3], G4 [0, 1/6].
    """
    if n_total <= 0:
        raise DomainError("group_of_ratio: total must be positive")
    if 6 * n_missing <= n_total:
        return "G4"
    if 3 * n_missing <= n_total:
        return "G3"
    if 2 * n_missing <= n_total:
        return "G2"
    return "G1"


def missing_group_of(visit: Visit) -> str:
    """Missing-ratio bin of a single visit."""
    return group_of_ratio(sum(not o for o in visit.observed), N_VIEWS)


def patient_missing_group(record: PatientRecord) -> str:
    """Missing-ratio bin over all of a patient's view slots."""
    missing = sum(sum(not o for o in v.observed) for v in record.visits)
    return group_of_ratio(missing, N_VIEWS * len(record.visits))


def visit_count_group(record: PatientRecord) -> str:
    """warm: > 2 visits, cold: exactly 1, mid: exactly 2."""
    n = len(record.visits)
    if n > 2:
        return "warm"
    if n == 1:
        return "cold"
    return "mid"
