"""Memory-enhanced soft router over the expert ensemble.

Node context and router features are projected to query embeddings, attend
over two memory banks, and produce per-expert logits through expert-specific
scaling of the retrieved embeddings. Training combines a KL warm-up against
the expert-correctness targets, an invariant (mean + variance) risk over
masked-feature environments, and coefficient-of-variation balancing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .experts import (
    anomaly_loss_t,
    anomaly_scores,
    cross_attn_reconstruct,
    encode,
    expert_correctness,
    sample_key_split,
)

log = logging.getLogger(__name__)


class RouterTrainingError(RuntimeError):
    pass


class RouterModel:
    """Trainable routing parameters; ``use_memory=False`` degrades to the
    projection-only ablation router."""

    def __init__(self, params, dims, seed=0, use_memory=True):
        self.params = params
        self.dims = dims  # (d, d_r, d_m, M, E)
        self.seed = seed
        self.use_memory = use_memory

    @property
    def d_r(self):
        return self.dims[1]

    def clone_params(self):
        return {k: v.copy() for k, v in self.params.items()}


@dataclass
class RoutingOutput:
    logits: np.ndarray  # N x E
    weights: np.ndarray  # N x E rows on the simplex
    retrieval_node: np.ndarray  # N x M attention over the node memory
    retrieval_feat: np.ndarray  # N x M attention over the feature memory


def _glorot(rng, shape):
    return rng.normal(0.0, np.sqrt(2.0 / sum(shape)), size=shape)


def init_router(d, d_r, d_m, n_memory, n_experts, seed, use_memory=True) -> RouterModel:
    rng = np.random.default_rng(seed)
    params = {
        "gnn_w": _glorot(rng, (d, d_m)),
        "proj_w": _glorot(rng, (d_r, d_m)),
        "proj_b": np.zeros(d_m),
        "mem_node": rng.standard_normal((n_memory, d_m)) / np.sqrt(d_m),
        "mem_feat": rng.standard_normal((n_memory, d_m)) / np.sqrt(d_m),
        "scale": rng.standard_normal((n_experts, d_m)) / np.sqrt(d_m),
        "noise_w": _glorot(rng, (d_r, n_experts)),
    }
    return RouterModel(params, (d, d_r, d_m, n_memory, n_experts), seed, use_memory)


def resize_router(model: RouterModel, new_d_r, seed) -> None:
    """Reinitialize the feature projection and noise head for a new input
    width; memories, the node encoder, and scale vectors persist."""
    if new_d_r == model.d_r:
        return
    rng = np.random.default_rng(seed)
    d, _, d_m, n_memory, n_experts = model.dims
    model.params["proj_w"] = _glorot(rng, (new_d_r, d_m))
    model.params["proj_b"] = np.zeros(d_m)
    model.params["noise_w"] = _glorot(rng, (new_d_r, n_experts))
    model.dims = (d, new_d_r, d_m, n_memory, n_experts)


def route_t(lv, xtilde, g, hr, noise=None, use_memory=True):
    """Tape forward; hr is the (possibly masked) standardized feature matrix
    and noise, when given, is a fixed N x E standard-normal draw."""
    if hr.shape[1] != lv["proj_w"].value.shape[0]:
        raise ValueError(
            f"feature width {hr.shape[1]} != router width {lv['proj_w'].value.shape[0]}"
        )
    hn_q = ad.tanh(
        ad.spmm(g.sym_norm_selfloops(), ad.matmul(ad.wrap(xtilde), lv["gnn_w"]))
    )
    hr_q = ad.add(ad.matmul(ad.wrap(hr), lv["proj_w"]), lv["proj_b"])
    if use_memory:
        s_n = ad.row_softmax(ad.matmul(hn_q, ad.transpose(lv["mem_node"])))
        s_r = ad.row_softmax(ad.matmul(hr_q, ad.transpose(lv["mem_feat"])))
        hn_m = ad.matmul(s_n, lv["mem_node"])
        hr_m = ad.matmul(s_r, lv["mem_feat"])
    else:
        s_n = s_r = None
        hn_m, hr_m = hn_q, hr_q
    logits = ad.matmul(ad.mul(hr_m, hn_m), ad.transpose(lv["scale"]))
    if noise is not None:
        logits = ad.add(
            logits,
            ad.mul(ad.wrap(noise), ad.softplus(ad.matmul(ad.wrap(hr), lv["noise_w"]))),
        )
    return {"G": logits, "P": ad.row_softmax(logits), "S_n": s_n, "S_r": s_r}


def route(model: RouterModel, xtilde, g, hr, train_mode=False, rng=None, mask=None):
    """Public routing call. Deterministic unless train_mode, in which case
    Gaussian exploration noise modulated by softplus(H_r W) is added to the
    logits. ``mask`` zeroes feature columns at fixed width."""
    hr = np.asarray(hr, dtype=np.float64)
    if mask is not None:
        hr = hr * np.asarray(mask, dtype=np.float64)
    noise = None
    if train_mode:
        rng = rng or np.random.default_rng()
        noise = rng.standard_normal((hr.shape[0], model.dims[4]))
    out = route_t(ad.leaves(model.params), xtilde, g, hr, noise, model.use_memory)
    m = model.dims[3]
    ones = np.full((hr.shape[0], m), 1.0 / m)
    return RoutingOutput(
        logits=out["G"].value,
        weights=out["P"].value,
        retrieval_node=out["S_n"].value if out["S_n"] is not None else ones,
        retrieval_feat=out["S_r"].value if out["S_r"] is not None else ones,
    )


def aggregate_t(p_rows, expert_mats):
    """Convex per-node mixture of frozen expert matrices by routing weights."""
    acc = None
    for e, mat in enumerate(expert_mats):
        term = ad.scale_rows(ad.wrap(mat), ad.col(p_rows, e))
        acc = term if acc is None else ad.add(acc, term)
    return acc


def aggregate(p, expert_h, expert_recon):
    """Soft aggregation of expert embeddings and reconstructions; returns
    (H_final, H_recon_final) as arrays."""
    for mats in (expert_h, expert_recon):
        for m in mats:
            if m.shape[0] != p.shape[0]:
                raise ValueError("routing weight rows do not match expert rows")
    pt = ad.wrap(p)
    return aggregate_t(pt, expert_h).value, aggregate_t(pt, expert_recon).value


def normalize_targets(q, n_experts):
    """Rows scaled to distributions; all-zero rows become uniform."""
    q = np.asarray(q, dtype=np.float64)
    s = q.sum(axis=1)
    out = q / np.maximum(s, 1.0)[:, None]
    out[s == 0] = 1.0 / n_experts
    return out


def kl_router_loss_t(q, g_t):
    qn = normalize_targets(q, g_t.value.shape[1])
    logq = np.where(qn > 0, np.log(np.maximum(qn, 1e-300)), 0.0)
    entropy = (qn * logq).sum(axis=1)
    cross = ad.tsum(ad.mul(ad.row_log_softmax(g_t), qn), axis=1)
    return ad.tmean(ad.sub(entropy, cross))


def kl_router_loss(q, g) -> float:
    """Mean row-wise KL(normalized targets || softmax(logits))."""
    return float(kl_router_loss_t(q, ad.wrap(np.asarray(g, dtype=np.float64))).value)


def _cv_squared_t(v):
    m = ad.tmean(v)
    dev = ad.sub(v, m)
    var = ad.tmean(ad.mul(dev, dev))
    return ad.div(var, ad.maximum_scalar(ad.mul(m, m), 1e-30))


def balance_loss_t(p_t, g_t):
    load_p = ad.tsum(p_t, axis=0)
    load_g = ad.tsum(g_t, axis=0)
    # CV needs nonnegative loads; logit sums are shifted by their minimum
    shifted = ad.sub(load_g, ad.vec_min(load_g))
    return ad.add(_cv_squared_t(load_p), _cv_squared_t(shifted))


def balance_loss(p, g) -> float:
    """Squared CV of per-expert weight mass plus squared CV of min-shifted
    logit mass."""
    return float(balance_loss_t(ad.wrap(p), ad.wrap(g)).value)


class RoutingContext:
    """Frozen per-graph material for router training and utility evaluation:
    the canonical key/query split, expert embeddings and reconstructions on
    the queries, the expert-correctness targets, and the (refreshable)
    standardized active feature matrix."""

    def __init__(self, graph, xtilde, table, experts, key_fraction, rng):
        self.graph = graph
        self.xtilde = xtilde
        self.table = table
        self.keys, self.queries = sample_key_split(graph.labels, key_fraction, rng)
        self.y_q = np.asarray(graph.labels)[self.queries]
        self.expert_h_full = [encode(m, xtilde, graph) for m in experts]
        self.expert_hq = [h[self.queries] for h in self.expert_h_full]
        self.expert_recon = [
            cross_attn_reconstruct(m, h, self.keys, self.queries)
            for m, h in zip(experts, self.expert_h_full)
        ]
        scores = np.stack(
            [anomaly_scores(hq, rec) for hq, rec in zip(self.expert_hq, self.expert_recon)]
        )
        self.q_matrix = expert_correctness(scores, self.y_q)
        self.expert_scores = scores
        self.hr = table.standardized_active()

    def refresh(self):
        self.hr = self.table.standardized_active()


def routing_utility(model: RouterModel, subset, contexts) -> float:
    """Alignment utility of a feature subset: minus the mean KL between the
    correctness targets and deterministic routing on the masked features
    (non-members zeroed at fixed width). Larger is better."""
    names = contexts[0].table.active_names()
    member = set(subset)
    mask = np.array([1.0 if n in member else 0.0 for n in names])
    vals = []
    for ctx in contexts:
        lv = ad.leaves(model.params)
        out = route_t(lv, ctx.xtilde, ctx.graph, ctx.hr * mask, None, model.use_memory)
        g_q = out["G"].value[ctx.queries]
        vals.append(kl_router_loss(ctx.q_matrix, g_q))
    return -float(np.mean(vals))


def _env_losses_t(lv, ctx, masks, noise, use_memory):
    losses = []
    for mask in masks:
        out = route_t(lv, ctx.xtilde, ctx.graph, ctx.hr * mask, noise, use_memory)
        p_q = ad.gather_rows(out["P"], ctx.queries)
        hq = aggregate_t(p_q, ctx.expert_hq)
        rec = aggregate_t(p_q, ctx.expert_recon)
        losses.append(anomaly_loss_t(hq, rec, ctx.y_q))
    return losses


def _combine_env_losses_t(losses, lam):
    vec = ad.stack_scalars(losses)
    # shifted mean: exact when all environments coincide (identical masks
    # must yield a zero variance term, bit for bit)
    anchor = ad.index_scalar(vec, 0)
    mean = ad.add(anchor, ad.tmean(ad.sub(vec, anchor)))
    dev = ad.sub(vec, mean)
    var = ad.tmean(ad.mul(dev, dev))
    return ad.add(mean, ad.mul(var, lam))


def invariant_env_draws(ctx, n_envs, mask_rate, seed):
    """Masks (one per environment) plus a single noise draw shared by all
    environments, so identical masks give identical environments."""
    rng = np.random.default_rng(seed)
    d_r = ctx.hr.shape[1]
    masks = (rng.random((n_envs, d_r)) >= mask_rate).astype(np.float64)
    noise = rng.standard_normal((ctx.graph.num_nodes, ctx.q_matrix.shape[1]))
    return masks, noise


def invariant_loss(model, ctx, n_envs, lam, mask_rate, seed):
    """Mean masked-environment anomaly loss plus lam times its population
    variance; returns (value, per-environment trace)."""
    if n_envs < 2:
        raise ValueError("invariant loss needs at least 2 environments")
    masks, noise = invariant_env_draws(ctx, n_envs, mask_rate, seed)
    lv = ad.leaves(model.params)
    losses = _env_losses_t(lv, ctx, masks, noise, model.use_memory)
    total = _combine_env_losses_t(losses, lam)
    return float(total.value), [float(l.value) for l in losses]


def train_router(model, contexts, cfg, phase, seed):
    """Warm-up (KL alignment) or main (invariant + balance) optimization with
    experts frozen; one step per epoch on the mean loss over graphs."""
    epochs = cfg.warmup_epochs if phase == "warmup" else cfg.router_epochs
    opt = ad.AdamW(model.params, lr=cfg.lr, weight_decay=cfg.wd)
    rng = np.random.default_rng(seed)
    trace = []
    n_experts = model.dims[4]
    for epoch in range(epochs):
        lv = ad.leaves(model.params)
        graph_losses = []
        for ctx in contexts:
            n = ctx.graph.num_nodes
            if phase == "warmup":
                noise = rng.standard_normal((n, n_experts))
                out = route_t(lv, ctx.xtilde, ctx.graph, ctx.hr, noise, model.use_memory)
                g_q = ad.gather_rows(out["G"], ctx.queries)
                graph_losses.append(kl_router_loss_t(ctx.q_matrix, g_q))
            else:
                d_r = ctx.hr.shape[1]
                masks = (rng.random((cfg.n_envs, d_r)) >= cfg.mask_rate).astype(float)
                env_noise = rng.standard_normal((n, n_experts))
                env = _env_losses_t(lv, ctx, masks, env_noise, model.use_memory)
                l_in = _combine_env_losses_t(env, cfg.lam)
                clean_noise = rng.standard_normal((n, n_experts))
                out = route_t(lv, ctx.xtilde, ctx.graph, ctx.hr, clean_noise, model.use_memory)
                l_moe = balance_loss_t(
                    ad.gather_rows(out["P"], ctx.queries),
                    ad.gather_rows(out["G"], ctx.queries),
                )
                graph_losses.append(ad.add(l_in, l_moe))
        total = ad.tmean(ad.stack_scalars(graph_losses))
        if not np.isfinite(total.value):
            raise RouterTrainingError(
                f"non-finite router loss at {phase} epoch {epoch} (trace={trace})"
            )
        total.backward()
        opt.step(ad.grads(lv))
        trace.append(float(total.value))
    return trace


def routing_frequency(weights) -> np.ndarray:
    """Per-expert share of total routing mass over a dataset (sums to 1)."""
    mass = np.asarray(weights).sum(axis=0)
    return mass / mass.sum()


def save_router(model: RouterModel, path, feature_names):
    header = {
        "kind": "router",
        "dims": list(model.dims),
        "seed": model.seed,
        "use_memory": model.use_memory,
        "feature_names": list(feature_names),
    }
    save_checkpoint(path, header, model.params)


def load_router(path):
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "router":
        raise ValueError(f"{path} is not a router checkpoint")
    model = RouterModel(
        params=tensors,
        dims=tuple(header["dims"]),
        seed=header["seed"],
        use_memory=header["use_memory"],
    )
    return model, header["feature_names"]
