"""Pipeline stages behind the CLI: generate, train, impute, predict, report.

Every stage writes its outputs plus a manifest JSON recording the config
snapshot, content hashes of inputs and outputs, wall-clock timings and the
active kernel backend. Data artifacts are bit-reproducible under a fixed
seed set; manifests are the one exception (timings).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .corpus import (Cohort, CohortConfig, VIEWS, apply_missingness,
                     generate_cohort, load_cohort, persist_cohort, split_cohort)
from .diffusion import DiffusionHyper, DiffusionModel, impute_cohort, train_diffusion
from .errors import ComparisonError, DomainError
from .metrics import (code_frequencies, gradient_contribution, group_report,
                      jsd, report_rows)
from .predictor import (PredictorHyper, PredictorModel, eligible_records,
                        predict_cohort, train_predictor)
from .rng import substream
from .verification import run_grad_checks

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = 1

PROFILES = {
    "desk": {},
    # paper-scale settings; retained as a named config, not exercised in tests
    "paper": {"d_tilde": 128, "diffusion_epochs": 50, "predictor_epochs": 50,
              "cohort": {"n_patients": 10000}},
}


@dataclass
class RunConfig:
    task: str = "PHE"
    d_tilde: int = 32
    layers: int = 2
    heads: int = 4
    T: int = 1000
    sample_steps: int = 20
    guidance_scale: float = 0.5
    k_prototypes: int = 10
    eta: float = 1e-3
    p_drop: float = 0.1
    lr: float = 1e-3
    weight_decay: float = 5e-4
    batch_size: int = 32
    diffusion_epochs: int = 20
    predictor_epochs: int = 15
    seed: int = 7
    split_seed: int = 1
    missing_rate: float = 0.3
    profile: str = "desk"
    cohort: CohortConfig = field(default_factory=CohortConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["cohort"] = self.cohort.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        kw = dict(d)
        if "cohort" in kw and kw["cohort"] is not None:
            kw["cohort"] = CohortConfig.from_dict(kw["cohort"])
        return cls(**kw)

    def diffusion_hyper(self) -> DiffusionHyper:
        return DiffusionHyper(
            d_tilde=self.d_tilde, layers=self.layers, heads=self.heads,
            T=self.T, sample_steps=self.sample_steps,
            guidance_scale=self.guidance_scale, p_drop=self.p_drop,
            k_prototypes=self.k_prototypes, lr=self.lr,
            weight_decay=self.weight_decay, batch_size=self.batch_size,
            epochs=self.diffusion_epochs)

    def predictor_hyper(self) -> PredictorHyper:
        return PredictorHyper(
            d_tilde=self.d_tilde, layers=self.layers, heads=self.heads,
            eta=self.eta, lr=self.lr, weight_decay=self.weight_decay,
            batch_size=self.batch_size, epochs=self.predictor_epochs)


def load_run_config(path: str | Path | None = None,
                    overrides: dict | None = None) -> RunConfig:
    """Defaults, then JSON file, then profile expansion, then CLI overrides."""
    merged = RunConfig().to_dict()
    if path is not None:
        file_cfg = json.loads(Path(path).read_text(encoding="utf-8"))
        _deep_update(merged, file_cfg)
    profile = (overrides or {}).get("profile", merged.get("profile", "desk"))
    if profile not in PROFILES:
        raise DomainError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    _deep_update(merged, PROFILES[profile])
    merged["profile"] = profile
    if overrides:
        _deep_update(merged, overrides)
    return RunConfig.from_dict(merged)


def _deep_update(base: dict, extra: dict) -> None:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v


# ---------------------------------------------------------------------------
# manifests


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_artifact(path: Path) -> dict:
    if path.is_dir():
        entries = {p.name: file_sha256(p) for p in sorted(path.iterdir()) if p.is_file()}
        return {"path": str(path), "sha256": entries}
    return {"path": str(path), "sha256": file_sha256(path)}


def write_manifest(command: str, config: RunConfig, inputs: dict[str, Path],
                   outputs: dict[str, Path], timings: dict[str, float],
                   manifest_path: Path) -> Path:
    manifest = {
        "manifest_schema": MANIFEST_SCHEMA,
        "command": command,
        "kernel_backend": kernels.BACKEND,
        "config": config.to_dict(),
        "inputs": {k: _hash_artifact(Path(p)) for k, p in inputs.items()},
        "outputs": {k: _hash_artifact(Path(p)) for k, p in outputs.items()},
        "timings_sec": {k: round(v, 3) for k, v in timings.items()},
    }
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")
    return manifest_path


def resolve_out(path: str | Path) -> Path:
    """Relative outputs land under $VIEWDIFF_OUTDIR when it is set."""
    p = Path(path)
    base = os.environ.get("VIEWDIFF_OUTDIR")
    if base and not p.is_absolute():
        return Path(base) / p
    return p


# ---------------------------------------------------------------------------
# stages


def stage_gen_data(config: RunConfig, out: Path, truth_out: Path | None = None) -> Path:
    t0 = time.monotonic()
    cohort = generate_cohort(config.cohort, seed=config.seed)
    outputs: dict[str, Path] = {"cohort": out}
    out.parent.mkdir(parents=True, exist_ok=True)
    if truth_out is not None:
        truth_out.parent.mkdir(parents=True, exist_ok=True)
        persist_cohort(cohort, truth_out)
        outputs["truth"] = truth_out
    masked = apply_missingness(cohort, config.missing_rate, seed=config.seed)
    persist_cohort(masked, out)
    return write_manifest("gen-data", config, {}, outputs,
                          {"total": time.monotonic() - t0},
                          out.with_suffix(out.suffix + ".manifest.json"))


def stage_train_diffusion(config: RunConfig, data: Path, out_dir: Path) -> Path:
    t0 = time.monotonic()
    cohort = load_cohort(data)
    train, _, _ = split_cohort(cohort, seed=config.split_seed)
    t_train = time.monotonic()
    model, history = train_diffusion(train, config.diffusion_hyper(), seed=config.seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.save(out_dir)
    history_path = out_dir / "history.json"
    history_path.write_text(json.dumps(history, indent=2) + "\n", encoding="utf-8")
    return write_manifest(
        "train-diffusion", config, {"cohort": data},
        {"checkpoint": out_dir, "history": history_path},
        {"train": time.monotonic() - t_train, "total": time.monotonic() - t0},
        out_dir / "run.manifest.json")


def stage_impute(config: RunConfig, data: Path, model_dir: Path, out: Path,
                 jobs: int = 1) -> Path:
    t0 = time.monotonic()
    cohort = load_cohort(data)
    model = DiffusionModel.load(model_dir)
    imputed = impute_cohort(cohort, model, seed=config.seed,
                            sample_steps=config.sample_steps,
                            guidance=config.guidance_scale, jobs=jobs)
    out.parent.mkdir(parents=True, exist_ok=True)
    persist_cohort(imputed, out)
    return write_manifest("impute", config,
                          {"cohort": data, "checkpoint": model_dir},
                          {"imputed": out}, {"total": time.monotonic() - t0},
                          out.with_suffix(out.suffix + ".manifest.json"))


def stage_train_predictor(config: RunConfig, data: Path, out_dir: Path) -> Path:
    t0 = time.monotonic()
    cohort = load_cohort(data)
    train, _, _ = split_cohort(cohort, seed=config.split_seed)
    model, history = train_predictor(train, config.predictor_hyper(), config.task,
                                     seed=config.seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.save(out_dir)
    history_path = out_dir / "history.json"
    history_path.write_text(json.dumps(history, indent=2) + "\n", encoding="utf-8")
    return write_manifest(
        "train-predictor", config, {"cohort": data},
        {"checkpoint": out_dir, "history": history_path},
        {"total": time.monotonic() - t0}, out_dir / "run.manifest.json")


def imputation_quality(truth: Cohort, imputed: Cohort, seed: int) -> tuple[dict, dict]:
    """Per-view recall/JSD of imputed codes against ground truth, with a
    uniform-random decoder baseline of matching set sizes.

    Returns (metrics dict, per-view frequency tables for CSV dumps).
    """
    truth_by_id = {r.patient_id: r for r in truth.records}
    per_view: dict[int, dict[str, list]] = {k: {"true": [], "imp": [], "base": []}
                                            for k in range(3)}
    for rec in imputed.records:
        t_rec = truth_by_id.get(rec.patient_id)
        if t_rec is None:
            raise DomainError(f"truth cohort lacks patient {rec.patient_id}")
        for j, visit in enumerate(rec.visits):
            for k in visit.imputed:
                true_codes = t_rec.visits[j].codes[k]
                rng = substream(seed, "baseline", rec.patient_id, j, k)
                base = rng.choice(imputed.vocab_sizes[k], size=len(true_codes),
                                  replace=False)
                per_view[k]["true"].append(true_codes)
                per_view[k]["imp"].append(visit.codes[k])
                per_view[k]["base"].append(tuple(int(c) for c in base))

    metrics: dict = {"views": {}, "masked_views_total": 0}
    freqs: dict = {}
    for k in range(3):
        sets = per_view[k]
        n = len(sets["true"])
        metrics["masked_views_total"] += n
        name = VIEWS[k]
        if n == 0:
            metrics["views"][name] = None
            continue
        v_size = imputed.vocab_sizes[k]

        def micro_recall(preds):
            hit = sum(len(set(p) & set(t)) for p, t in zip(preds, sets["true"]))
            total = sum(len(t) for t in sets["true"])
            return hit / total if total else None

        f_true = code_frequencies(sets["true"], v_size)
        f_imp = code_frequencies(sets["imp"], v_size)
        f_base = code_frequencies(sets["base"], v_size)
        recall = micro_recall(sets["imp"])
        base_recall = micro_recall(sets["base"])
        metrics["views"][name] = {
            "n_instances": n,
            "recall": recall,
            "baseline_recall": base_recall,
            "recall_ratio": (recall / base_recall) if base_recall else None,
            "jsd": jsd(f_imp, f_true),
            "baseline_jsd": jsd(f_base, f_true),
        }
        freqs[name] = {"true": f_true, "imputed": f_imp, "baseline": f_base}
    return metrics, freqs


def stage_evaluate(config: RunConfig, data: Path, model_dir: Path, out_dir: Path,
                   truth: Path | None = None) -> Path:
    t0 = time.monotonic()
    cohort = load_cohort(data)
    _, _, test = split_cohort(cohort, seed=config.split_seed)
    model = PredictorModel.load(model_dir)
    if model.task != config.task:
        raise ComparisonError(
            f"predictor checkpoint task {model.task} != configured task {config.task}")

    samples = predict_cohort(model, test)
    report = group_report(test, samples, model.task)
    contrib = gradient_contribution(model, eligible_records(test, model.task))

    out_dir.mkdir(parents=True, exist_ok=True)
    pred_path = out_dir / "predictions.jsonl"
    with open(pred_path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(s, separators=(",", ":")) + "\n")

    metrics = {
        "task": model.task,
        "n_samples": len(samples),
        "report": report,
        "gradient_contribution": [float(x) for x in contrib],
        "imputation": None,
    }
    outputs = {"predictions": pred_path}
    inputs = {"cohort": data, "checkpoint": model_dir}
    if truth is not None:
        truth_cohort = load_cohort(truth)
        _, _, truth_test = split_cohort(truth_cohort, seed=config.split_seed)
        quality, freqs = imputation_quality(truth_test, test, seed=config.seed)
        metrics["imputation"] = quality
        inputs["truth"] = truth
        for name, table in freqs.items():
            freq_path = out_dir / f"freq_{name}.csv"
            with open(freq_path, "w", encoding="utf-8") as f:
                f.write("code,true_count,imputed_count,baseline_count\n")
                for c in range(len(table["true"])):
                    f.write(f"{c},{table['true'][c]:g},{table['imputed'][c]:g},"
                            f"{table['baseline'][c]:g}\n")
            outputs[f"freq_{name}"] = freq_path

    metrics_path = out_dir / "metrics.json"
    metrics_path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n",
                            encoding="utf-8")
    csv_path = out_dir / "metrics.csv"
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write("group,metric,value\n")
        for group, name, value in report_rows(report):
            f.write(f"{group},{name},{'' if value is None else repr(value)}\n")
        for k, name in enumerate(VIEWS):
            f.write(f"gradient_contribution,{name},{contrib[k]!r}\n")
    outputs.update({"metrics": metrics_path, "metrics_csv": csv_path})
    return write_manifest("evaluate", config, inputs, outputs,
                          {"total": time.monotonic() - t0},
                          out_dir / "run.manifest.json")


def stage_report(manifest_paths: list[Path], out: Path) -> Path:
    """Side-by-side CSV of metrics across evaluate runs."""
    runs = []
    for path in manifest_paths:
        manifest = json.loads(Path(path).read_text(encoding="utf-8"))
        if manifest.get("command") != "evaluate":
            raise ComparisonError(f"{path} is not an evaluate manifest")
        metrics_path = Path(manifest["outputs"]["metrics"]["path"])
        metrics = json.loads(metrics_path.read_text(encoding="utf-8"))
        runs.append((Path(path).parent.name or str(path), manifest, metrics))

    tasks = {m["task"] for _, _, m in runs}
    if len(tasks) > 1:
        raise ComparisonError(f"cannot compare runs across tasks {sorted(tasks)}")

    names = [name for name, _, _ in runs]
    rows: list[list] = []
    first_rows = report_rows(runs[0][2]["report"])
    for i, (group, metric, _) in enumerate(first_rows):
        row = [group, metric]
        for _, _, metrics in runs:
            value = report_rows(metrics["report"])[i][2]
            row.append("" if value is None else repr(value))
        rows.append(row)
    for k, view in enumerate(VIEWS):
        row = ["gradient_contribution", view]
        for _, _, metrics in runs:
            row.append(repr(metrics["gradient_contribution"][k]))
        rows.append(row)
    for view in VIEWS:
        for field_name in ("recall", "baseline_recall", "recall_ratio", "jsd",
                           "baseline_jsd"):
            row = [f"imputation_{view}", field_name]
            any_value = False
            for _, _, metrics in runs:
                imp = metrics.get("imputation")
                view_stats = (imp or {}).get("views", {}).get(view)
                if view_stats:
                    row.append(repr(view_stats[field_name]))
                    any_value = True
                else:
                    row.append("")
            if any_value:
                rows.append(row)

    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        f.write("group,metric," + ",".join(names) + "\n")
        for row in rows:
            f.write(",".join(str(x) for x in row) + "\n")
    return out


def stage_grad_check(seed: int = 2024) -> tuple[bool, list[str]]:
    """Run the numerics verification suite; returns (all_passed, lines)."""
    lines = []
    ok = True
    for name, rep in run_grad_checks(seed=seed):
        status = "PASS" if rep.passed else "FAIL"
        ok = ok and rep.passed
        lines.append(f"{status} {name}: max_rel_err={rep.max_rel_err:.3e} "
                     f"coords={rep.n_checked} worst={rep.worst_param}")
    return ok, lines
