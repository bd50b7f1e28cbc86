"""Longitudinal per-view encoders with inverse-advantage reweighting.

Each view's visit sequence runs through its own causal transformer; a
fused head reads the concatenated per-view states and per-view heads read
each state alone. The gap between the fused loss and each per-view loss
(relative advantage) reweights the per-view task losses through a
simplex-constrained weight vector, discouraging reliance on one dominant
view. Tasks: multi-label phenotype prediction of the next visit (PHE) and
10-class length-of-stay classification of the current visit (LOS).
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import ParamStore, Tensor
from .corpus import N_LOS_CLASSES, N_VIEWS, Cohort, PatientRecord
from .diffusion import sinusoidal_embedding
from .encoder import EmbeddingTables, encode_visits
from .errors import DomainError, ShapeError, TrainingDiverged, ValidationError
from .optim import Adam
from .rng import substream

log = logging.getLogger(__name__)

TASKS = ("PHE", "LOS")


@dataclass
class PredictorHyper:
    d_tilde: int = 32
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    eta: float = 1e-3
    loss_guard: float = 1e-8
    lr: float = 1e-3
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 15

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorHyper":
        return cls(**d)


def task_dim(task: str, n_phenotypes: int) -> int:
    if task == "PHE":
        return n_phenotypes
    if task == "LOS":
        return N_LOS_CLASSES
    raise DomainError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# reweighting primitives


def relative_advantage(fused_loss: float, view_losses: Sequence[float],
                       guard: float = 1e-8) -> np.ndarray:
    """Per-view advantage (fused - view) / fused on detached loss values."""
    if fused_loss <= guard:
        raise DomainError(f"relative_advantage: fused loss {fused_loss} <= guard {guard}")
    return np.array([(fused_loss - lv) / fused_loss for lv in view_losses])


def advantage_weights(rho: Tensor) -> Tensor:
    """Simplex weights n = softmax(rho); strictly positive, summing to 1."""
    return ad.reshape(ad.softmax(ad.reshape(rho, (1, N_VIEWS))), (N_VIEWS,))


def inverse_advantage_loss(r: np.ndarray, rho: Tensor) -> Tensor:
    """r . n with r held constant, so only the weight logits receive gradient."""
    return ad.sum_(ad.mul(advantage_weights(rho), ad.constant(np.asarray(r))))


def total_loss(view_losses: Sequence[Tensor], r: np.ndarray, rho: Tensor,
               eta: float) -> Tensor:
    """Weighted per-view task loss plus eta times the inverse-advantage loss."""
    if eta < 0:
        raise DomainError(f"total_loss: eta must be >= 0, got {eta}")
    losses = ad.concat([ad.reshape(lv, (1,)) for lv in view_losses], axis=0)
    weighted = ad.sum_(ad.mul(advantage_weights(rho), losses))
    return ad.add(weighted, ad.scale(inverse_advantage_loss(r, rho), eta))


# ---------------------------------------------------------------------------
# model


@dataclass
class BatchOutput:
    """One forward pass over a batch of patients for a task."""

    fused_input: Tensor            # (S, 3*d) gathered at prediction positions
    fused_logits: Tensor           # (S, C)
    view_logits: list[Tensor]      # three (S, C)
    labels: np.ndarray             # (S, C) multi-hot for PHE, (S,) ints for LOS
    sample_meta: list[tuple[str, int]]   # (patient_id, predicted visit index)


class PredictorModel:
    """Per-view causal transformers, prediction heads and advantage logits."""

    def __init__(self, vocab_sizes: Sequence[int], n_phenotypes: int, task: str,
                 hyper: PredictorHyper, seed: int):
        if task not in TASKS:
            raise DomainError(f"unknown task {task!r}")
        if hyper.d_tilde % hyper.heads:
            raise DomainError(f"width {hyper.d_tilde} not divisible by {hyper.heads} heads")
        self.vocab_sizes = tuple(vocab_sizes)
        self.n_phenotypes = n_phenotypes
        self.task = task
        self.hyper = hyper
        self.seed = seed
        self.out_dim = task_dim(task, n_phenotypes)
        self.store = ParamStore()
        rng = substream(seed, "predictor.init")
        d = hyper.d_tilde
        self.tables = EmbeddingTables.create(self.store, vocab_sizes, d, rng)
        s = 1.0 / np.sqrt(d)
        hidden = hyper.mlp_ratio * d
        for k in range(N_VIEWS):
            for i in range(hyper.layers):
                p = f"seq{k}.l{i}"
                self.store.add(f"{p}.ln1.g", np.ones(d))
                self.store.add(f"{p}.ln1.b", np.zeros(d))
                for n in ("wq", "wk", "wv", "wo"):
                    self.store.add(f"{p}.{n}", rng.normal(size=(d, d)) * s)
                self.store.add(f"{p}.ln2.g", np.ones(d))
                self.store.add(f"{p}.ln2.b", np.zeros(d))
                self.store.add(f"{p}.w1", rng.normal(size=(d, hidden)) * s)
                self.store.add(f"{p}.b1", np.zeros(hidden))
                self.store.add(f"{p}.w2", rng.normal(size=(hidden, d)) / np.sqrt(hidden))
                self.store.add(f"{p}.b2", np.zeros(d))
            self.store.add(f"seq{k}.lnf.g", np.ones(d))
            self.store.add(f"seq{k}.lnf.b", np.zeros(d))
        self.store.add("head.fused.w", rng.normal(size=(N_VIEWS * d, self.out_dim)) * s)
        self.store.add("head.fused.b", np.zeros(self.out_dim))
        for k in range(N_VIEWS):
            self.store.add(f"head.view{k}.w", rng.normal(size=(d, self.out_dim)) * s)
            self.store.add(f"head.view{k}.b", np.zeros(self.out_dim))
        self.store.add("adv.rho", np.zeros(N_VIEWS))

    @property
    def rho(self) -> Tensor:
        return self.store["adv.rho"]

    def weights(self) -> np.ndarray:
        """Current simplex weights n."""
        return advantage_weights(self.rho).data.copy()

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return ad.add(ad.mul(ad.layer_norm(x), self.store[f"{name}.g"]),
                      self.store[f"{name}.b"])

    def encode_view(self, view: int, visit_vecs: Tensor,
                    valid: np.ndarray) -> Tensor:
        """Causal transformer over one view's visit-vector sequence.

        visit_vecs: (B, T, d) sum-pooled code embeddings for this view;
        output at position j depends only on positions <= j.
        """
        b, t, d = visit_vecs.shape
        if t == 0:
            raise DomainError("encode_view: empty visit sequence")
        x = ad.add(visit_vecs, ad.constant(sinusoidal_embedding(np.arange(t), d)[None]))
        for i in range(self.hyper.layers):
            p = f"seq{view}.l{i}"
            y = self._ln(x, f"{p}.ln1")
            q = ad.matmul(y, self.store[f"{p}.wq"])
            k = ad.matmul(y, self.store[f"{p}.wk"])
            v = ad.matmul(y, self.store[f"{p}.wv"])
            att = ad.attention(q, k, v, n_heads=self.hyper.heads, causal=True,
                               key_valid=valid)
            x = ad.add(x, ad.matmul(att, self.store[f"{p}.wo"]))
            y = self._ln(x, f"{p}.ln2")
            y = ad.add(ad.matmul(y, self.store[f"{p}.w1"]), self.store[f"{p}.b1"])
            y = ad.add(ad.matmul(ad.gelu(y), self.store[f"{p}.w2"]),
                       self.store[f"{p}.b2"])
            x = ad.add(x, y)
        return self._ln(x, f"seq{view}.lnf")

    def encode_longitudinal(self, records: Sequence[PatientRecord]) -> tuple[list[Tensor], np.ndarray]:
        """Per-view causal states (B, T, d) over padded visit sequences."""
        if not records or any(len(r.visits) == 0 for r in records):
            raise DomainError("encode_longitudinal: empty visit sequence")
        b = len(records)
        t_max = max(len(r.visits) for r in records)
        d = self.hyper.d_tilde
        flat = [v for r in records for v in r.visits]
        # all code sets contribute (imputed views carry codes; genuinely
        # missing views have empty sets and pool to the zero vector)
        vecs = encode_visits(flat, self.tables,
                             observed=np.ones((len(flat), N_VIEWS), dtype=bool))
        bank = ad.concat([vecs, ad.constant(np.zeros((1, N_VIEWS * d)))], axis=0)
        idx = np.full((b, t_max), len(flat), dtype=np.int64)
        valid = np.zeros((b, t_max), dtype=bool)
        pos = 0
        for i, rec in enumerate(records):
            n = len(rec.visits)
            idx[i, :n] = np.arange(pos, pos + n)
            valid[i, :n] = True
            pos += n
        padded = ad.embedding(bank, idx)  # (B, T, 3d)
        views = []
        for k in range(N_VIEWS):
            sl = padded[:, :, k * d:(k + 1) * d]
            views.append(self.encode_view(k, sl, valid))
        return views, valid

    def forward_batch(self, records: Sequence[PatientRecord],
                      task: str | None = None) -> BatchOutput | None:
        """Predictions at every valid position of every patient in the batch.

        PHE predicts visit j+1's phenotype set from visits 1..j; LOS
        predicts visit j's stay bucket from visits 1..j. Returns None when
        the batch contributes no samples (e.g. all single-visit for PHE).
        """
        task = task or self.task
        views, valid = self.encode_longitudinal(records)
        b_idx: list[int] = []
        t_idx: list[int] = []
        labels: list = []
        meta: list[tuple[str, int]] = []
        for i, rec in enumerate(records):
            n = len(rec.visits)
            if task == "PHE":
                for j in range(n - 1):
                    b_idx.append(i)
                    t_idx.append(j)
                    labels.append(rec.visits[j + 1].phenotypes)
                    meta.append((rec.patient_id, j + 1))
            else:
                for j in range(n):
                    b_idx.append(i)
                    t_idx.append(j)
                    labels.append(rec.visits[j].los_class)
                    meta.append((rec.patient_id, j))
        if not b_idx:
            return None
        bi = np.asarray(b_idx)
        ti = np.asarray(t_idx)
        u_cat = ad.concat(views, axis=2)
        fused_input = ad.select_positions(u_cat, bi, ti)
        fused_logits = ad.add(ad.matmul(fused_input, self.store["head.fused.w"]),
                              self.store["head.fused.b"])
        view_logits = []
        d = self.hyper.d_tilde
        for k in range(N_VIEWS):
            sel = fused_input[:, k * d:(k + 1) * d]
            view_logits.append(ad.add(ad.matmul(sel, self.store[f"head.view{k}.w"]),
                                      self.store[f"head.view{k}.b"]))
        if task == "PHE":
            lab = np.zeros((len(labels), self.out_dim))
            for i, phe in enumerate(labels):
                lab[i, list(phe)] = 1.0
        else:
            lab = np.asarray(labels, dtype=np.int64)
        return BatchOutput(fused_input=fused_input, fused_logits=fused_logits,
                           view_logits=view_logits, labels=lab, sample_meta=meta)

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> None:
        hyper = {"kind": "predictor", "vocab_sizes": list(self.vocab_sizes),
                 "n_phenotypes": self.n_phenotypes, "task": self.task,
                 "seed": self.seed, **self.hyper.to_dict()}
        ckpt.save_checkpoint(path, self.store.arrays(), hyper)

    @classmethod
    def load(cls, path: str | Path) -> "PredictorModel":
        arrays, hyper = ckpt.load_checkpoint(path)
        if hyper.get("kind") != "predictor":
            raise DomainError(f"checkpoint at {path} is not a predictor model")
        vocab_sizes = tuple(hyper.pop("vocab_sizes"))
        model = cls(vocab_sizes, hyper.pop("n_phenotypes"), hyper.pop("task"),
                    PredictorHyper.from_dict(
                        {k: v for k, v in hyper.items() if k not in ("kind", "seed")}),
                    hyper.pop("seed"))
        model.store.load_arrays(arrays)
        return model


def task_loss(logits: Tensor, labels: np.ndarray, task: str) -> Tensor:
    """Mean multi-label binary CE for PHE, categorical CE for LOS."""
    if task == "PHE":
        return ad.bce_with_logits(logits, labels, reduction="mean")
    return ad.ce_with_logits(logits, labels, reduction="mean")


def predict(u_views: Sequence[Tensor], model: PredictorModel) -> tuple[Tensor, list[Tensor]]:
    """Fused and per-view logits from per-view representations (S, d) each."""
    widths = {u.shape[-1] for u in u_views}
    if widths != {model.hyper.d_tilde}:
        raise ShapeError(f"predict: view widths {widths} != {model.hyper.d_tilde}")
    cat = ad.concat(list(u_views), axis=-1)
    fused = ad.add(ad.matmul(cat, model.store["head.fused.w"]),
                   model.store["head.fused.b"])
    per_view = [ad.add(ad.matmul(u_views[k], model.store[f"head.view{k}.w"]),
                       model.store[f"head.view{k}.b"])
                for k in range(N_VIEWS)]
    return fused, per_view


# ---------------------------------------------------------------------------
# training


def eligible_records(cohort: Cohort, task: str) -> list[PatientRecord]:
    """Patients that contribute at least one sample for the task."""
    if task == "PHE":
        return [r for r in cohort.records if len(r.visits) >= 2]
    return list(cohort.records)


def train_predictor(cohort: Cohort, hyper: PredictorHyper, task: str,
                    seed: int) -> tuple[PredictorModel, dict]:
    """Adam training of encoders, tables, heads and advantage logits.

    The optimized objective is the fused-head loss plus the reweighted
    per-view losses plus eta times the inverse-advantage term; the
    advantage vector r is computed on detached losses each step.
    """
    model = PredictorModel(cohort.vocab_sizes, cohort.n_phenotypes, task, hyper, seed)
    records = eligible_records(cohort, task)
    if not records:
        raise ValidationError(f"no patients contribute samples for task {task}")
    optimizer = Adam(model.store, lr=hyper.lr, weight_decay=hyper.weight_decay)
    history = {"epoch_loss": [], "weights": [], "advantage": []}

    for epoch in range(hyper.epochs):
        perm = substream(seed, "predictor.shuffle", epoch).permutation(len(records))
        losses = []
        r_sum = np.zeros(N_VIEWS)
        n_steps = 0
        for start in range(0, len(records), hyper.batch_size):
            batch = [records[i] for i in perm[start:start + hyper.batch_size]]
            out = model.forward_batch(batch, task)
            if out is None:
                continue
            fused = task_loss(out.fused_logits, out.labels, task)
            view_losses = [task_loss(out.view_logits[k], out.labels, task)
                           for k in range(N_VIEWS)]
            r = relative_advantage(float(fused.data),
                                   [float(lv.data) for lv in view_losses],
                                   guard=hyper.loss_guard)
            objective = ad.add(fused, total_loss(view_losses, r, model.rho, hyper.eta))
            if not np.isfinite(objective.data):
                raise TrainingDiverged(
                    f"predictor loss is not finite at epoch {epoch}")
            optimizer.zero_grad()
            ad.backward(objective)
            optimizer.step()
            losses.append(float(objective.data))
            r_sum += r
            n_steps += 1
        epoch_loss = float(np.mean(losses))
        history["epoch_loss"].append(epoch_loss)
        history["weights"].append([float(x) for x in model.weights()])
        history["advantage"].append([float(x) for x in r_sum / max(n_steps, 1)])
        log.info("predictor[%s] epoch %d/%d loss %.4f n=%s", task, epoch + 1,
                 hyper.epochs, epoch_loss,
                 np.round(history["weights"][-1], 3).tolist())
    return model, history


# ---------------------------------------------------------------------------
# inference dumps


def predict_cohort(model: PredictorModel, cohort: Cohort,
                   batch_size: int = 64) -> list[dict]:
    """Per-sample prediction dump: patient, predicted visit, scores, label."""
    records = eligible_records(cohort, model.task)
    out: list[dict] = []
    for start in range(0, len(records), batch_size):
        batch = records[start:start + batch_size]
        res = model.forward_batch(batch)
        if res is None:
            continue
        if model.task == "PHE":
            scores = ad.sigmoid(res.fused_logits).data
            labels = [sorted(np.flatnonzero(row).tolist()) for row in res.labels]
        else:
            scores = ad.softmax(res.fused_logits).data
            labels = [int(x) for x in res.labels]
        for i, (pid, visit_idx) in enumerate(res.sample_meta):
            out.append({"patient": pid, "visit": visit_idx,
                        "scores": [float(x) for x in scores[i]],
                        "label": labels[i]})
    return out
