"""Forward noising, denoiser training, guided sampling and code decoding.

The generative state is the visit latent from :mod:`viewdiff.encoder`;
only the v-slots of missing (or artificially masked) views are ever
noised. Training reconstructs the clean latent from a uniformly sampled
noise level with squared-error terms plus a rounding term that keeps the
continuous latent decodable into discrete codes. Sampling walks a strided
subsequence of steps deterministically (posterior mean only), combining
conditional and unconditional predictions with a fixed guidance scale,
then decodes the missing views back to code sets.
"""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import ParamStore, Tensor
from .corpus import N_VIEWS, Cohort, PatientRecord, Visit
from .encoder import (EmbeddingTables, IntraAttention, PrototypeSet, SlotLayout,
                      encode_visits, fit_prototypes, intra_condition_batch,
                      mask_vectors, prototype_block, visit_vectors_raw)
from .errors import DomainError, ShapeError, TrainingDiverged, ValidationError
from .optim import Adam
from .rng import stream_key, substream

log = logging.getLogger(__name__)

# the 6 proper nonempty missing patterns (observed flags with 1 or 2 views masked)
TRAIN_MASK_PATTERNS: tuple[tuple[bool, bool, bool], ...] = (
    (False, True, True), (True, False, True), (True, True, False),
    (True, False, False), (False, True, False), (False, False, True),
)


# ---------------------------------------------------------------------------
# noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise levels plus closed-form marginal/posterior tables.

    Arrays are indexed by t-1 for t in 1..T. ``post_a``/``post_b`` are the
    coefficients of h_t and h_0 in the posterior mean, ``post_var`` the
    posterior variance.
    """

    betas: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative signal level, with the empty product at t=0 equal to 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])

    def posterior_coeffs(self, t_hi: int, t_lo: int) -> tuple[float, float, float]:
        """(A, B, var) of the reverse jump t_hi -> t_lo (0 <= t_lo < t_hi).

        For t_lo = t_hi - 1 these are the single-step posterior
        coefficients; larger jumps use the effective step
        alpha' = alpha_bar(t_hi)/alpha_bar(t_lo) of the strided sub-chain.
        """
        if not 0 <= t_lo < t_hi <= self.T:
            raise DomainError(f"posterior_coeffs: bad jump {t_hi} -> {t_lo}")
        ab_hi = self.alpha_bar_at(t_hi)
        ab_lo = self.alpha_bar_at(t_lo)
        denom = 1.0 - ab_hi
        if denom <= 0.0:
            # no noise has been added yet: the reverse jump is the identity
            return 1.0, 0.0, 0.0
        alpha_eff = ab_hi / ab_lo
        a = np.sqrt(alpha_eff) * (1.0 - ab_lo) / denom
        b = np.sqrt(ab_lo) * (1.0 - alpha_eff) / denom
        var = (1.0 - alpha_eff) * (1.0 - ab_lo) / denom
        return float(a), float(b), float(var)

    @classmethod
    def from_betas(cls, betas: Sequence[float]) -> "NoiseSchedule":
        arr = np.asarray(betas, dtype=np.float64)
        if arr.ndim != 1 or len(arr) < 1:
            raise DomainError("from_betas: need a 1-D nonempty beta array")
        if (arr < 0.0).any() or (arr >= 1.0).any():
            raise DomainError("from_betas: betas must lie in [0, 1)")
        return cls(betas=arr)


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp over T steps."""
    if T < 1:
        raise DomainError(f"make_schedule: T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise DomainError(
            f"make_schedule: need 0 < beta_start <= beta_end < 1, got "
            f"({beta_start}, {beta_end})")
    return NoiseSchedule(betas=np.linspace(beta_start, beta_end, T))


# ---------------------------------------------------------------------------
# diffusion state over the visit latent


@dataclass
class DiffusionState:
    """Batch latent with the noise step and the noised-entry mask.

    Condition slots (z, c, b) and observed v-slots are never in ``noised``
    and are therefore carried through every forward/reverse step unchanged.
    """

    h: np.ndarray            # (N, layout.total)
    t: int
    layout: SlotLayout
    noised: np.ndarray       # (N, layout.total) bool

    def __post_init__(self):
        if self.h.shape != self.noised.shape:
            raise ShapeError(f"DiffusionState: h {self.h.shape} vs noised {self.noised.shape}")
        if self.h.shape[1] != self.layout.total:
            raise ShapeError(f"DiffusionState: width {self.h.shape[1]} != {self.layout.total}")
        allowed = np.zeros(self.layout.total, dtype=bool)
        allowed[self.layout.block("v")] = True
        if (self.noised & ~allowed[None, :]).any():
            raise ValidationError("DiffusionState: noised flags outside the v block")


def noised_mask(layout: SlotLayout, observed: np.ndarray) -> np.ndarray:
    """(N, total) mask that is True exactly on missing-view v-slots."""
    observed = np.asarray(observed, dtype=bool)
    mask = np.zeros((observed.shape[0], layout.total), dtype=bool)
    for k in range(N_VIEWS):
        mask[:, layout.v_slot(k)] = ~observed[:, k, None]
    return mask


def q_sample(state: DiffusionState, t: int, noise: np.ndarray,
             schedule: NoiseSchedule) -> DiffusionState:
    """Single-shot forward marginal: noised slots get sqrt(ab)*h0 + sqrt(1-ab)*eps."""
    if not 1 <= t <= schedule.T:
        raise DomainError(f"q_sample: t={t} outside [1, {schedule.T}]")
    ab = schedule.alpha_bar_at(t)
    h = state.h.copy()
    h[state.noised] = (np.sqrt(ab) * state.h + np.sqrt(1.0 - ab) * noise)[state.noised]
    return DiffusionState(h=h, t=t, layout=state.layout, noised=state.noised)


def posterior_step(state: DiffusionState, v_pred: np.ndarray,
                   schedule: NoiseSchedule, noise: np.ndarray | None = None,
                   t_lo: int | None = None) -> DiffusionState:
    """Reverse step to ``t_lo`` (default t-1) given the predicted clean v block.

    Noised slots move to A*h_t + B*h0_hat (+ sqrt(var)*noise when provided
    and t_lo >= 1); all other slots are clamped to their current clean
    values by construction.
    """
    if t_lo is None:
        t_lo = state.t - 1
    a, b, var = schedule.posterior_coeffs(state.t, t_lo)
    full_pred = state.h.copy()
    full_pred[:, state.layout.block("v")] = v_pred
    mean = a * state.h + b * full_pred
    h = state.h.copy()
    h[state.noised] = mean[state.noised]
    if noise is not None and t_lo >= 1 and var > 0.0:
        h[state.noised] += (np.sqrt(var) * noise)[state.noised]
    return DiffusionState(h=h, t=t_lo, layout=state.layout, noised=state.noised)


def cfg_combine(out_uncond: np.ndarray, out_cond: np.ndarray, s: float) -> np.ndarray:
    """Guided prediction: uncond + s * (cond - uncond); exact at s=0 and s=1."""
    if out_uncond.shape != out_cond.shape:
        raise ShapeError(f"cfg_combine: {out_uncond.shape} vs {out_cond.shape}")
    if s == 0.0:
        return out_uncond.copy()
    if s == 1.0:
        return out_cond.copy()
    return out_uncond + s * (out_cond - out_uncond)


def sample_steps_sequence(T: int, n_steps: int) -> list[int]:
    """Uniformly strided descending step indices from T down to 1."""
    if not 1 <= n_steps <= T:
        raise DomainError(f"sample_steps must lie in [1, {T}], got {n_steps}")
    ts = np.unique(np.round(np.linspace(T, 1, n_steps)).astype(int))
    return [int(t) for t in ts[::-1]]


# ---------------------------------------------------------------------------
# denoiser network


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Standard sin/cos features of the integer step index."""
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


@dataclass
class Denoiser:
    """Slot-token transformer over the 12 width-d slots of the latent.

    A sinusoidal embedding of the step index is added to every token; the
    prediction of the clean v block is read from the three v-slot tokens.
    """

    store: ParamStore
    layout: SlotLayout
    layers: int
    heads: int
    prefix: str = "denoiser"

    @classmethod
    def create(cls, store: ParamStore, layout: SlotLayout, layers: int, heads: int,
               rng: np.random.Generator, mlp_ratio: int = 4,
               prefix: str = "denoiser") -> "Denoiser":
        d = layout.width
        if d % heads:
            raise DomainError(f"denoiser width {d} not divisible by {heads} heads")
        s = 1.0 / np.sqrt(d)
        hidden = mlp_ratio * d
        for i in range(layers):
            p = f"{prefix}.l{i}"
            store.add(f"{p}.ln1.g", np.ones(d))
            store.add(f"{p}.ln1.b", np.zeros(d))
            for n in ("wq", "wk", "wv", "wo"):
                store.add(f"{p}.{n}", rng.normal(size=(d, d)) * s)
            store.add(f"{p}.ln2.g", np.ones(d))
            store.add(f"{p}.ln2.b", np.zeros(d))
            store.add(f"{p}.w1", rng.normal(size=(d, hidden)) * s)
            store.add(f"{p}.b1", np.zeros(hidden))
            store.add(f"{p}.w2", rng.normal(size=(hidden, d)) / np.sqrt(hidden))
            store.add(f"{p}.b2", np.zeros(d))
        store.add(f"{prefix}.lnf.g", np.ones(d))
        store.add(f"{prefix}.lnf.b", np.zeros(d))
        store.add(f"{prefix}.wout", rng.normal(size=(d, d)) * s)
        store.add(f"{prefix}.bout", np.zeros(d))
        return cls(store=store, layout=layout, layers=layers, heads=heads, prefix=prefix)

    def _ln(self, x: Tensor, name: str) -> Tensor:
        g = self.store[f"{name}.g"]
        b = self.store[f"{name}.b"]
        return ad.add(ad.mul(ad.layer_norm(x), g), b)

    def forward(self, h: Tensor, t: np.ndarray) -> Tensor:
        """Predict the clean v block; h is (N, layout.total), t is (N,) ints."""
        n = h.shape[0]
        d = self.layout.width
        if h.shape[1] != self.layout.total:
            raise ShapeError(f"denoiser: latent width {h.shape[1]} != {self.layout.total}")
        x = ad.reshape(h, (n, self.layout.n_slots, d))
        temb = sinusoidal_embedding(np.asarray(t), d)
        x = ad.add(x, ad.constant(temb[:, None, :]))
        for i in range(self.layers):
            p = f"{self.prefix}.l{i}"
            y = self._ln(x, f"{p}.ln1")
            q = ad.matmul(y, self.store[f"{p}.wq"])
            k = ad.matmul(y, self.store[f"{p}.wk"])
            v = ad.matmul(y, self.store[f"{p}.wv"])
            att = ad.matmul(ad.attention(q, k, v, n_heads=self.heads),
                            self.store[f"{p}.wo"])
            x = ad.add(x, att)
            y = self._ln(x, f"{p}.ln2")
            y = ad.add(ad.matmul(y, self.store[f"{p}.w1"]), self.store[f"{p}.b1"])
            y = ad.add(ad.matmul(ad.gelu(y), self.store[f"{p}.w2"]), self.store[f"{p}.b2"])
            x = ad.add(x, y)
        x = self._ln(x, f"{self.prefix}.lnf")
        v_tokens = x[:, 3 * 3:, :]  # the three v-slot tokens
        out = ad.add(ad.matmul(v_tokens, self.store[f"{self.prefix}.wout"]),
                     self.store[f"{self.prefix}.bout"])
        return ad.reshape(out, (n, N_VIEWS * d))


# ---------------------------------------------------------------------------
# rounding (continuous -> discrete)


def decode_logits(v_block: Tensor, tables: EmbeddingTables,
                  biases: Sequence[Tensor]) -> list[Tensor]:
    """Per-view code logits: <v slice, code embedding> + bias."""
    d = tables.width
    out = []
    for k in range(N_VIEWS):
        sl = v_block[:, k * d:(k + 1) * d]
        table_t = ad.transpose(tables.code_tables[k], (1, 0))
        out.append(ad.add(ad.matmul(sl, table_t), biases[k]))
    return out


def round_decode(v_slice: np.ndarray, table: np.ndarray,
                 bias: np.ndarray) -> tuple[int, ...]:
    """Code set from one view's latent slice: sigmoid(logit) > 0.5, with the
    argmax code as fallback when nothing clears the threshold."""
    logits = table @ v_slice + bias
    codes = np.flatnonzero(logits > 0.0)
    if codes.size == 0:
        codes = np.array([int(logits.argmax())])
    return tuple(int(c) for c in codes)


def rounding_nll(v_block: Tensor, visits: Sequence[Visit], tables: EmbeddingTables,
                 biases: Sequence[Tensor]) -> Tensor:
    """-log p(codes | clean latent) under per-code Bernoulli factorization,
    summed over views and codes, averaged over the batch."""
    n = len(visits)
    logits = decode_logits(v_block, tables, biases)
    total = None
    for k in range(N_VIEWS):
        hot = np.zeros((n, tables.code_tables[k].shape[0]))
        for i, visit in enumerate(visits):
            hot[i, list(visit.codes[k])] = 1.0
        term = ad.scale(ad.bce_with_logits(logits[k], hot, reduction="sum"), 1.0 / n)
        total = term if total is None else ad.add(total, term)
    return total


def diffusion_loss_from_pred(pred_v: Tensor, v_true: Tensor, t: np.ndarray,
                             visits: Sequence[Visit], tables: EmbeddingTables,
                             biases: Sequence[Tensor]) -> tuple[Tensor, dict]:
    """Training loss given the denoiser prediction of the clean v block.

    Squared reconstruction error (summed over the block, averaged over the
    batch) is attributed to the t>=2 term or, for samples drawn at t=1, to
    the embedding-consistency term. The rounding term is the code NLL of
    both the clean latent (keeps embeddings self-decodable) and the
    predicted latent (keeps what sampling actually decodes on the decodable
    manifold; without this half, decode margins of predictions collapse as
    the embeddings drift during joint training). Returns
    (scalar loss, float components).
    """
    n = pred_v.shape[0]
    t = np.asarray(t)
    diff = ad.sub(pred_v, v_true)
    row_sq = ad.sum_(ad.mul(diff, diff), axis=1)
    w_t = (t >= 2).astype(np.float64)
    w_emb = (t == 1).astype(np.float64)
    mse_t = ad.scale(ad.sum_(ad.mul(row_sq, ad.constant(w_t))), 1.0 / n)
    mse_emb = ad.scale(ad.sum_(ad.mul(row_sq, ad.constant(w_emb))), 1.0 / n)
    nll = ad.add(rounding_nll(v_true, visits, tables, biases),
                 rounding_nll(pred_v, visits, tables, biases))
    loss = ad.add(ad.add(mse_t, mse_emb), nll)
    components = {"mse_t": float(mse_t.data), "mse_emb": float(mse_emb.data),
                  "nll_round": float(nll.data)}
    return loss, components


# ---------------------------------------------------------------------------
# model bundle


@dataclass
class DiffusionHyper:
    d_tilde: int = 32
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: int = 20
    guidance_scale: float = 0.5
    p_drop: float = 0.1
    k_prototypes: int = 10
    proto_iters: int = 50
    lr: float = 1e-3
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 20

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionHyper":
        return cls(**d)


class DiffusionModel:
    """Embedding tables, condition encoders, denoiser and decode biases."""

    def __init__(self, vocab_sizes: Sequence[int], hyper: DiffusionHyper, seed: int):
        self.vocab_sizes = tuple(vocab_sizes)
        self.hyper = hyper
        self.seed = seed
        self.layout = SlotLayout(hyper.d_tilde)
        self.schedule = make_schedule(hyper.T, hyper.beta_start, hyper.beta_end)
        self.store = ParamStore()
        rng = substream(seed, "diffusion.init")
        self.tables = EmbeddingTables.create(self.store, vocab_sizes, hyper.d_tilde, rng)
        self.intra = IntraAttention.create(self.store, self.layout.block_width, rng)
        self.denoiser = Denoiser.create(self.store, self.layout, hyper.layers,
                                        hyper.heads, rng, mlp_ratio=hyper.mlp_ratio)
        self.decode_biases = tuple(
            self.store.add(f"decode.bias.{k}", np.zeros(v))
            for k, v in enumerate(self.vocab_sizes))
        self.prototypes: PrototypeSet | None = None

    # -- conditions ---------------------------------------------------------

    def history_block(self, histories: Sequence[Sequence[Visit]]) -> Tensor:
        """Batched intra-patient condition z from each sample's earlier visits."""
        n = len(histories)
        width = self.layout.block_width
        flat: list[Visit] = []
        spans = []
        for hist in histories:
            spans.append((len(flat), len(hist)))
            flat.extend(hist)
        if not flat:
            return ad.constant(np.zeros((n, width)))
        flat_vec = encode_visits(flat, self.tables)
        padded_bank = ad.concat([flat_vec, ad.constant(np.zeros((1, width)))], axis=0)
        hmax = max(length for _, length in spans)
        idx = np.full((n, hmax), len(flat), dtype=np.int64)
        valid = np.zeros((n, hmax), dtype=bool)
        for i, (start, length) in enumerate(spans):
            idx[i, :length] = np.arange(start, start + length)
            valid[i, :length] = True
        padded = ad.embedding(padded_bank, idx)
        return intra_condition_batch(padded, valid, self.intra)

    def condition_blocks(self, visits: Sequence[Visit],
                         histories: Sequence[Sequence[Visit]],
                         observed: np.ndarray) -> tuple[Tensor, np.ndarray, Tensor]:
        """(z tensor, c constant, b tensor) for a batch under given flags."""
        if self.prototypes is None:
            raise DomainError("prototypes not fitted; train or load the model first")
        z = self.history_block(histories)
        vv = visit_vectors_raw(visits, self.tables, observed=observed)
        c = prototype_block(vv, observed, self.prototypes)
        b = mask_vectors(observed, self.tables)
        return z, c, b

    # -- persistence ----------------------------------------------------------

    def arrays(self) -> dict[str, np.ndarray]:
        out = self.store.arrays()
        if self.prototypes is not None:
            for k in range(N_VIEWS):
                out[f"prototypes.{k}"] = self.prototypes.centroids[k].copy()
        return out

    def save(self, path: str | Path) -> None:
        hyper = {"kind": "diffusion", "vocab_sizes": list(self.vocab_sizes),
                 "seed": self.seed, **self.hyper.to_dict()}
        ckpt.save_checkpoint(path, self.arrays(), hyper)

    @classmethod
    def load(cls, path: str | Path) -> "DiffusionModel":
        arrays, hyper = ckpt.load_checkpoint(path)
        if hyper.get("kind") != "diffusion":
            raise DomainError(f"checkpoint at {path} is not a diffusion model")
        vocab_sizes = tuple(hyper.pop("vocab_sizes"))
        seed = hyper.pop("seed")
        hyper.pop("kind")
        model = cls(vocab_sizes, DiffusionHyper.from_dict(hyper), seed)
        proto = {}
        for k in range(N_VIEWS):
            name = f"prototypes.{k}"
            if name in arrays:
                proto[k] = arrays.pop(name)
        model.store.load_arrays(arrays)
        if proto:
            model.prototypes = PrototypeSet(tuple(proto[k] for k in range(N_VIEWS)))
        return model


# ---------------------------------------------------------------------------
# training


def complete_visit_index(cohort: Cohort) -> list[tuple[int, int]]:
    """(record, visit) indices of visits with all views observed."""
    out = []
    for r, rec in enumerate(cohort.records):
        for j, visit in enumerate(rec.visits):
            if all(visit.observed):
                out.append((r, j))
    return out


def refresh_prototypes(model: DiffusionModel, cohort: Cohort, seed: int) -> None:
    """Refit per-view prototypes on all observed training visits.

    After the first fit, refits warm-start from the current centroids so the
    prototype geometry the denoiser conditions on stays stable while the
    embeddings drift.
    """
    visits = [v for rec in cohort.records for v in rec.visits]
    vv = visit_vectors_raw(visits, model.tables)
    obs = np.array([v.observed for v in visits], dtype=bool)
    per_view = []
    k = model.hyper.k_prototypes
    for view in range(N_VIEWS):
        vecs = vv[obs[:, view], view, :]
        if len(vecs) < k:
            raise DomainError(
                f"need >= {k} observed visits in view {view} to fit prototypes, "
                f"got {len(vecs)}")
        per_view.append(vecs)
    model.prototypes = fit_prototypes(per_view, k, seed=seed,
                                      max_iters=model.hyper.proto_iters,
                                      warm_start=model.prototypes)


def train_diffusion(train_cohort: Cohort, hyper: DiffusionHyper,
                    seed: int) -> tuple[DiffusionModel, dict]:
    """Train the denoiser on complete visits with artificial masks.

    Per batch: draw one of the 6 proper nonempty mask patterns per visit,
    sample t uniformly in [1, T], noise the masked v-slots via the
    closed-form marginal, optionally drop the z/c condition blocks, and
    take one Adam step on the reconstruction + rounding loss.
    """
    model = DiffusionModel(train_cohort.vocab_sizes, hyper, seed)
    samples = complete_visit_index(train_cohort)
    if not samples:
        raise ValidationError("training cohort has no complete visits to mask")
    optimizer = Adam(model.store, lr=hyper.lr, weight_decay=hyper.weight_decay)
    layout = model.layout
    schedule = model.schedule
    history = {"epoch_loss": [], "components": []}

    for epoch in range(hyper.epochs):
        refresh_prototypes(model, train_cohort, seed=(seed ^ stream_key("proto")))
        perm = substream(seed, "diffusion.shuffle", epoch).permutation(len(samples))
        ep_rng = substream(seed, "diffusion.epoch", epoch)
        losses = []
        comps_sum = {"mse_t": 0.0, "mse_emb": 0.0, "nll_round": 0.0}
        for start in range(0, len(samples), hyper.batch_size):
            batch_idx = [samples[i] for i in perm[start:start + hyper.batch_size]]
            visits = [train_cohort.records[r].visits[j] for r, j in batch_idx]
            histories = [train_cohort.records[r].visits[:j] for r, j in batch_idx]
            n = len(visits)
            if any(not all(v.observed) for v in visits):
                raise ValidationError("incomplete visit in training batch")

            observed = np.array([TRAIN_MASK_PATTERNS[p]
                                 for p in ep_rng.integers(len(TRAIN_MASK_PATTERNS), size=n)])
            t = ep_rng.integers(1, schedule.T + 1, size=n)
            eps = ep_rng.standard_normal((n, layout.total))
            keep = (ep_rng.random(n) >= hyper.p_drop).astype(np.float64)[:, None]

            z, c, b = model.condition_blocks(visits, histories, observed)
            z = ad.mul(z, ad.constant(keep))
            c_t = ad.constant(c * keep)
            v_true = encode_visits(visits, model.tables)
            h0 = ad.concat([z, c_t, b, v_true], axis=1)

            mask = noised_mask(layout, observed)
            ab = schedule.alpha_bar[t - 1][:, None]
            coef = np.where(mask, np.sqrt(ab), 1.0)
            shift = np.where(mask, np.sqrt(1.0 - ab) * eps, 0.0)
            h_t = ad.add(ad.mul(h0, ad.constant(coef)), ad.constant(shift))

            pred = model.denoiser.forward(h_t, t)
            loss, comps = diffusion_loss_from_pred(pred, v_true, t, visits,
                                                   model.tables, model.decode_biases)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"diffusion loss is not finite at epoch {epoch} "
                    f"(components {comps})")
            optimizer.zero_grad()
            ad.backward(loss)
            optimizer.step()
            losses.append(float(loss.data))
            for key in comps_sum:
                comps_sum[key] += comps[key]

        epoch_loss = float(np.mean(losses))
        history["epoch_loss"].append(epoch_loss)
        history["components"].append({k: v / max(len(losses), 1)
                                      for k, v in comps_sum.items()})
        log.info("diffusion epoch %d/%d loss %.4f", epoch + 1, hyper.epochs, epoch_loss)
    # the checkpointed prototypes are exactly the ones the final epoch
    # conditioned on; a post-hoc refit would shift them under the model
    return model, history


# ---------------------------------------------------------------------------
# imputation


def _denoise_batch(model: DiffusionModel, visits: list[Visit],
                   histories: list[Sequence[Visit]], keys: list[tuple[str, int]],
                   seed: int, n_steps: int, guidance: float,
                   trace: list | None = None) -> list[Visit]:
    """Impute the missing views of a batch of visits (each with >= 1 missing)."""
    layout = model.layout
    schedule = model.schedule
    n = len(visits)
    observed = np.array([v.observed for v in visits], dtype=bool)
    z, c, b = model.condition_blocks(visits, histories, observed)
    v_obs = encode_visits(visits, model.tables).data
    h0 = np.concatenate([z.data, c, b.data, v_obs], axis=1)
    mask = noised_mask(layout, observed)

    # per-visit noise streams make the result independent of batching order
    init = np.zeros((n, layout.total))
    for i, (pid, j) in enumerate(keys):
        init[i] = substream(seed, "impute", pid, j).standard_normal(layout.total)
    h = h0.copy()
    h[mask] = init[mask]
    state = DiffusionState(h=h, t=schedule.T, layout=layout, noised=mask)
    if trace is not None:
        trace.append(state.h.copy())

    steps = sample_steps_sequence(schedule.T, n_steps)
    for pos, t in enumerate(steps):
        t_lo = steps[pos + 1] if pos + 1 < len(steps) else 0
        t_arr = np.full(n, t)
        h_cond = state.h
        h_unc = state.h.copy()
        h_unc[:, layout.block("z")] = 0.0
        h_unc[:, layout.block("c")] = 0.0
        pred_c = model.denoiser.forward(ad.constant(h_cond), t_arr).data
        pred_u = model.denoiser.forward(ad.constant(h_unc), t_arr).data
        guided = cfg_combine(pred_u, pred_c, guidance)
        state = posterior_step(state, guided, schedule, noise=None, t_lo=t_lo)
        # clamp: conditions and observed slots must carry their clean values
        state.h[~mask] = h0[~mask]
        if trace is not None:
            trace.append(state.h.copy())

    out = []
    for i, visit in enumerate(visits):
        codes = list(visit.codes)
        filled = []
        for k in range(N_VIEWS):
            if visit.observed[k]:
                continue
            sl = state.h[i, layout.v_slot(k)]
            codes[k] = round_decode(sl, model.tables.code_tables[k].data,
                                    model.decode_biases[k].data)
            filled.append(k)
        out.append(dataclasses.replace(visit, codes=tuple(codes),
                                       imputed=tuple(filled)))
    return out


def impute_cohort(cohort: Cohort, model: DiffusionModel, seed: int,
                  sample_steps: int | None = None, guidance: float | None = None,
                  jobs: int = 1, batch_size: int = 256) -> Cohort:
    """Fill every missing view in the cohort; complete visits pass through."""
    if model.prototypes is None:
        raise DomainError("model has no prototypes; train or load a full checkpoint")
    n_steps = model.hyper.sample_steps if sample_steps is None else sample_steps
    s = model.hyper.guidance_scale if guidance is None else guidance
    todo = []
    for r, rec in enumerate(cohort.records):
        for j, visit in enumerate(rec.visits):
            if not all(visit.observed):
                todo.append((r, j))
    if not todo:
        return cohort

    def run_chunk(chunk: list[tuple[int, int]]) -> list[tuple[tuple[int, int], Visit]]:
        visits = [cohort.records[r].visits[j] for r, j in chunk]
        histories = [cohort.records[r].visits[:j] for r, j in chunk]
        keys = [(cohort.records[r].patient_id, j) for r, j in chunk]
        done = _denoise_batch(model, visits, histories, keys, seed, n_steps, s)
        return list(zip(chunk, done))

    chunks = [todo[i:i + batch_size] for i in range(0, len(todo), batch_size)]
    results: dict[tuple[int, int], Visit] = {}
    if jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for chunk_result in pool.map(run_chunk, chunks):
                results.update(dict(chunk_result))
    else:
        for chunk in chunks:
            results.update(dict(run_chunk(chunk)))

    records = []
    for r, rec in enumerate(cohort.records):
        visits = tuple(results.get((r, j), v) for j, v in enumerate(rec.visits))
        records.append(dataclasses.replace(rec, visits=visits))
    return cohort.replace_records(records)


def impute_visit(visit: Visit, history: Sequence[Visit], model: DiffusionModel,
                 seed: int, sample_steps: int | None = None,
                 guidance: float | None = None) -> Visit:
    """Single-visit imputation; a complete visit is returned unchanged."""
    if all(visit.observed):
        return visit
    n_steps = model.hyper.sample_steps if sample_steps is None else sample_steps
    s = model.hyper.guidance_scale if guidance is None else guidance
    return _denoise_batch(model, [visit], [history], [("_single", 0)], seed,
                          n_steps, s)[0]
