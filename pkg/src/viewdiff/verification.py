"""Finite-difference verification of every differentiable surface.

Exposed both as the ``grad-check`` CLI subcommand and as the first
acceptance gate: every primitive op, the full denoiser loss at width 4,
and the predictor stack (task-loss path over all parameters, plus the
inverse-advantage path that by design reaches only the weight logits).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, ParamStore, Tensor, grad_check
from .corpus import CohortConfig, generate_cohort
from .diffusion import (DiffusionHyper, DiffusionModel, TRAIN_MASK_PATTERNS,
                        complete_visit_index, diffusion_loss_from_pred,
                        noised_mask, refresh_prototypes)
from .encoder import encode_visits
from .predictor import (PredictorHyper, PredictorModel, inverse_advantage_loss,
                        relative_advantage, task_loss, total_loss)
from .rng import substream


@dataclass
class CheckCase:
    name: str
    params: dict[str, Tensor]
    build: Callable[[], Tensor]
    sample_frac: float = 0.05


def op_cases(seed: int = 2024) -> list[CheckCase]:
    """One scalar-loss graph per primitive op."""
    cases = []

    def new(name):
        g = substream(seed, "verify.ops", name)
        store = ParamStore()
        return g, store

    g, store = new("add_mul")
    x = store.add("x", g.normal(size=(3, 4)))
    y = store.add("y", g.normal(size=(4,)))
    cases.append(CheckCase("add_mul", store.tensors(),
                           lambda x=x, y=y: ad.mean(ad.mul(ad.add(x, y), ad.add(x, y)))))

    g, store = new("matmul")
    a = store.add("a", g.normal(size=(3, 4)))
    b = store.add("b", g.normal(size=(4, 2)))
    cases.append(CheckCase("matmul", store.tensors(),
                           lambda a=a, b=b: ad.mean(ad.mul(ad.matmul(a, b),
                                                           ad.matmul(a, b)))))

    g, store = new("concat_slice")
    a = store.add("a", g.normal(size=(3, 4)))
    b = store.add("b", g.normal(size=(3, 2)))
    c = ad.constant(g.normal(size=(3, 3)))
    cases.append(CheckCase("concat_slice", store.tensors(),
                           lambda a=a, b=b, c=c: ad.mean(
                               ad.mul(ad.concat([a, b], axis=1)[:, 2:5], c))))

    g, store = new("sum_pool")
    rows = store.add("rows", g.normal(size=(6, 4)))
    seg = np.array([0, 0, 2, 1, 2, 2])
    c = ad.constant(g.normal(size=(4, 4)))
    cases.append(CheckCase("sum_pool", store.tensors(),
                           lambda rows=rows, c=c: ad.mean(
                               ad.mul(ad.segment_sum(rows, seg, 4), c))))

    g, store = new("softmax")
    x = store.add("x", g.normal(size=(3, 5)))
    t = ad.constant(np.full((3, 5), 0.2))
    cases.append(CheckCase("softmax", store.tensors(),
                           lambda x=x, t=t: ad.mse(ad.softmax(x), t)))

    g, store = new("layer_norm")
    x = store.add("x", g.normal(size=(3, 5)))
    t = ad.constant(g.normal(size=(3, 5)))
    cases.append(CheckCase("layer_norm", store.tensors(),
                           lambda x=x, t=t: ad.mse(ad.layer_norm(x), t)))

    g, store = new("embedding")
    table = store.add("table", g.normal(size=(5, 4)))
    idx = g.integers(0, 5, size=9)
    cases.append(CheckCase("embedding", store.tensors(),
                           lambda table=table, idx=idx: ad.mean(
                               ad.mul(ad.embedding(table, idx), ad.embedding(table, idx)))))

    g, store = new("sigmoid_log")
    x = store.add("x", g.normal(size=(3, 4)))
    cases.append(CheckCase("sigmoid_log", store.tensors(),
                           lambda x=x: ad.mean(ad.log(ad.add(ad.sigmoid(x),
                                                             ad.constant(np.full((3, 4), 0.05)))))))

    g, store = new("gelu")
    x = store.add("x", g.normal(size=(3, 4)))
    cases.append(CheckCase("gelu", store.tensors(), lambda x=x: ad.mean(ad.gelu(x))))

    g, store = new("mse")
    x = store.add("x", g.normal(size=(3, 4)))
    y = store.add("y", g.normal(size=(3, 4)))
    cases.append(CheckCase("mse", store.tensors(), lambda x=x, y=y: ad.mse(x, y)))

    g, store = new("bce")
    x = store.add("x", g.normal(size=(3, 4)))
    targets = (g.random(size=(3, 4)) > 0.5).astype(float)
    cases.append(CheckCase("bce", store.tensors(),
                           lambda x=x: ad.bce_with_logits(x, targets)))

    g, store = new("ce")
    x = store.add("x", g.normal(size=(4, 5)))
    labels = g.integers(0, 5, size=4)
    cases.append(CheckCase("ce", store.tensors(),
                           lambda x=x: ad.ce_with_logits(x, labels)))

    g, store = new("attention")
    q = store.add("q", g.normal(size=(2, 3, 4)))
    valid = np.array([[True, True, True], [True, True, False]])
    cases.append(CheckCase("attention", store.tensors(),
                           lambda q=q: ad.mean(ad.attention(q, q, q, n_heads=2,
                                                            causal=True, key_valid=valid))))

    g, store = new("select_positions")
    h = store.add("h", g.normal(size=(2, 3, 4)))
    c = ad.constant(g.normal(size=(3, 4)))
    bi = np.array([0, 1, 1])
    ti = np.array([2, 0, 2])
    cases.append(CheckCase("select_positions", store.tensors(),
                           lambda h=h, c=c: ad.mean(
                               ad.mul(ad.select_positions(h, bi, ti), c))))
    return cases


_TINY_COHORT = CohortConfig(n_patients=8, visits_min=1, visits_max=3,
                            vocab_sizes=(6, 4, 4), n_classes=2, codes_min=1,
                            codes_max=2, n_phenotypes=4)


def denoiser_case(seed: int = 2024) -> CheckCase:
    """Full diffusion training loss at width 4 over a fixed masked batch."""
    cohort = generate_cohort(_TINY_COHORT, seed=seed)
    hyper = DiffusionHyper(d_tilde=4, layers=1, heads=2, T=8, k_prototypes=2,
                           epochs=1, batch_size=4)
    model = DiffusionModel(cohort.vocab_sizes, hyper, seed=seed)
    refresh_prototypes(model, cohort, seed=seed)
    samples = complete_visit_index(cohort)[:3]
    visits = [cohort.records[r].visits[j] for r, j in samples]
    histories = [cohort.records[r].visits[:j] for r, j in samples]
    g = substream(seed, "verify.denoiser")
    observed = np.array([TRAIN_MASK_PATTERNS[p]
                         for p in g.integers(len(TRAIN_MASK_PATTERNS), size=len(visits))])
    t = g.integers(1, hyper.T + 1, size=len(visits))
    eps = g.standard_normal((len(visits), model.layout.total))
    mask = noised_mask(model.layout, observed)
    ab = model.schedule.alpha_bar[t - 1][:, None]
    coef = np.where(mask, np.sqrt(ab), 1.0)
    shift = np.where(mask, np.sqrt(1.0 - ab) * eps, 0.0)
    # prototype assignments freeze here: recomputing them inside the probe
    # could flip a nearest-centroid decision under coordinate perturbation
    from .encoder import prototype_block, visit_vectors_raw
    c_const = prototype_block(visit_vectors_raw(visits, model.tables, observed=observed),
                              observed, model.prototypes)

    def build():
        z, _, b = model.condition_blocks(visits, histories, observed)
        v_true = encode_visits(visits, model.tables)
        h0 = ad.concat([z, ad.constant(c_const), b, v_true], axis=1)
        h_t = ad.add(ad.mul(h0, ad.constant(coef)), ad.constant(shift))
        pred = model.denoiser.forward(h_t, t)
        loss, _ = diffusion_loss_from_pred(pred, v_true, t, visits, model.tables,
                                           model.decode_biases)
        return loss

    return CheckCase("denoiser_d4", model.store.tensors(), build, sample_frac=0.01)


def predictor_cases(seed: int = 2024) -> list[CheckCase]:
    """Task-loss path over all parameters plus the detached-advantage path."""
    cohort = generate_cohort(dataclasses.replace(_TINY_COHORT, visits_min=2),
                             seed=seed + 1)
    hyper = PredictorHyper(d_tilde=4, layers=1, heads=2, epochs=1)
    model = PredictorModel(cohort.vocab_sizes, cohort.n_phenotypes, "PHE", hyper,
                           seed=seed)
    records = list(cohort.records[:4])

    def build_task():
        out = model.forward_batch(records)
        fused = task_loss(out.fused_logits, out.labels, "PHE")
        view_losses = [task_loss(out.view_logits[k], out.labels, "PHE")
                       for k in range(3)]
        # r is a stop-gradient quantity; with eta=0 the objective is the
        # fused plus weighted per-view task losses, all differentiable
        return ad.add(fused, total_loss(view_losses, np.zeros(3), model.rho, eta=0.0))

    r_fixed = np.array([0.4, -0.2, 0.1])

    def build_inverse():
        return inverse_advantage_loss(r_fixed, model.rho)

    return [
        CheckCase("predictor_task_path", model.store.tensors(), build_task,
                  sample_frac=0.01),
        CheckCase("predictor_inverse_path", {"adv.rho": model.rho}, build_inverse,
                  sample_frac=1.0),
    ]


def run_grad_checks(seed: int = 2024, tolerance: float = 1e-4) -> list[tuple[str, GradCheckReport]]:
    """Run the whole suite; returns (name, report) pairs in execution order."""
    results = []
    for case in op_cases(seed):
        rng = substream(seed, "verify.sample", case.name)
        results.append((case.name, grad_check(case.build, case.params, rng,
                                              tolerance=tolerance,
                                              sample_frac=case.sample_frac)))
    case = denoiser_case(seed)
    rng = substream(seed, "verify.sample", case.name)
    results.append((case.name, grad_check(case.build, case.params, rng,
                                          tolerance=tolerance,
                                          sample_frac=case.sample_frac)))
    for case in predictor_cases(seed):
        rng = substream(seed, "verify.sample", case.name)
        results.append((case.name, grad_check(case.build, case.params, rng,
                                              tolerance=tolerance,
                                              sample_frac=case.sample_frac)))
    return results
