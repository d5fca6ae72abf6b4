"""Multiview-consistent metric learning jointly trained with canonical pose regression.

One iteration draws a metric batch of ``m`` anchor/positive pairs (same subject,
same instant, two views) and a regression batch from the labelled frames, sums

    L = L_cnstr + lambda_pose * L_pose

and takes one Adam step on encoder and head.
"""
from __future__ import annotations

import bisect
import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import neural as nn
from .data import Dataset, holdout_split, split_supervision, view_table
from .errors import (BatchConstructionError, ConfigError, InsufficientDataError, NumericError,
                     ValidationError)
from .metrics import n_mpjpe

log = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-9
STD_FLOOR = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.6
    beta: float = 0.3
    dim_phi: int = 128
    hidden: tuple = (256, 256)
    metric_batch: int = 66
    regression_batch: int = 22
    batch_ratio: int = 3
    epochs: int = 40
    iters_per_epoch: int = 0  # 0 = one pass over the metric-learning frames
    lr: float = 1e-3
    lr_drop: float = 0.1
    lr_drop_every: int = 20
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    lambda_pose: float = 1.0
    min_temporal_gap: int = 10
    seed: int = 0
    mode: str = "mcss"
    supervision_fraction: float = 0.1
    supervision_subjects: tuple = (1,)  # empty = every subject
    val_fraction: float = 0.2
    step_mode: str = "sum"
    cross_subject_batches: bool = False

    def validate(self):
        if not self.alpha > self.beta > 0:
            raise ConfigError("alpha: need alpha > beta > 0")
        if self.metric_batch < 2:
            raise ConfigError("metric_batch: must be >= 2")
        if self.regression_batch < 1 or self.batch_ratio < 1:
            raise ConfigError("regression_batch: must be >= 1")
        if self.metric_batch != self.batch_ratio * self.regression_batch:
            raise ConfigError(
                f"batch_ratio: metric_batch {self.metric_batch} != {self.batch_ratio} x regression_batch "
                f"{self.regression_batch}")
        if self.epochs < 0 or self.iters_per_epoch < 0:
            raise ConfigError("epochs: must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr: must be > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("adam_beta1: Adam betas must lie in [0, 1)")
        if self.lambda_pose < 0:
            raise ConfigError("lambda_pose: must be >= 0")
        if self.min_temporal_gap < 0:
            raise ConfigError("min_temporal_gap: must be >= 0")
        if self.mode not in ("mcss", "baseline"):
            raise ConfigError(f"mode: unknown mode {self.mode!r}")
        if self.step_mode not in ("sum", "alternate"):
            raise ConfigError(f"step_mode: unknown step mode {self.step_mode!r}")
        if not 0 <= self.supervision_fraction <= 1:
            raise ConfigError("supervision_fraction: must lie in [0, 1]")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction: must lie in [0, 1)")
        if self.dim_phi < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("dim_phi: layer widths must be >= 1")


# -- mini-batch construction ---------------------------------------------------

@dataclass
class MetricBatch:
    anchors: np.ndarray        # (m, 32)
    positives: np.ndarray      # (m, 32)
    subject: np.ndarray        # (m,)
    frame: np.ndarray          # (m,)
    anchor_view: np.ndarray    # (m,)
    positive_view: np.ndarray  # (m,)

    def __len__(self):
        return len(self.frame)


def _spaced_sample(units, gap, m, rng):
    """Random subset of ``m`` units (sorted frame arrays per group) pairwise >= gap apart.

    ``units`` is a list of ``(group, frame)``; only units of the same group are
    constrained. Returns positions into ``units`` in random order, or None.
    """
    order = rng.permutation(len(units))
    taken = {}
    out = []
    for pos in order:
        g, f = units[pos]
        lst = taken.setdefault(g, [])
        k = bisect.bisect_left(lst, f)
        if (k > 0 and f - lst[k - 1] < gap) or (k < len(lst) and lst[k] - f < gap):
            continue
        lst.insert(k, f)
        out.append(pos)
        if len(out) == m:
            return np.array(out)
    return None


def _greedy_spaced(units, gap):
    """Maximum spaced subset (left-to-right greedy is optimal per group)."""
    last = {}
    keep = []
    for pos in sorted(range(len(units)), key=lambda p: units[p]):
        g, f = units[pos]
        if g not in last or f - last[g] >= gap:
            last[g] = f
            keep.append(pos)
    return keep


def build_metric_batch(ds: Dataset, subject_id, m: int, min_temporal_gap: int,
                       rng: np.random.Generator) -> MetricBatch:
    """Sample ``m`` anchor/positive pairs for one subject (``None`` pools every subject)."""
    subjects = ds.subject_ids if subject_id is None else [subject_id]
    units, rows = [], []
    for s in subjects:
        frames, idx = view_table(ds, s)
        ok = np.flatnonzero((idx >= 0).sum(axis=1) >= 2)
        units.extend((s, int(frames[k])) for k in ok)
        rows.extend(idx[k] for k in ok)
    picks = None
    for _ in range(20):
        picks = _spaced_sample(units, min_temporal_gap, m, rng)
        if picks is not None:
            break
    if picks is None:
        feasible = _greedy_spaced(units, min_temporal_gap)
        if len(feasible) < m:
            who = f"subject {subject_id}" if subject_id is not None else "pooled subjects"
            raise BatchConstructionError(
                f"{who}: only {len(feasible)} frames with >= 2 views are pairwise >= "
                f"{min_temporal_gap} frames apart; metric batch needs {m}")
        picks = rng.choice(np.array(feasible), size=m, replace=False)
    a_idx = np.empty(m, dtype=np.int64)
    p_idx = np.empty(m, dtype=np.int64)
    for i, pos in enumerate(picks):
        avail = np.flatnonzero(rows[pos] >= 0)
        va, vb = rng.choice(avail, size=2, replace=False)  # uniform over ordered distinct pairs
        a_idx[i] = rows[pos][va]
        p_idx[i] = rows[pos][vb]
    return MetricBatch(np.array(ds.obs[a_idx]), np.array(ds.obs[p_idx]), np.array(ds.subject[a_idx]),
                       np.array(ds.frame[a_idx]), np.array(ds.view[a_idx]), np.array(ds.view[p_idx]))


def check_metric_batch(batch: MetricBatch, min_temporal_gap: int, single_subject=True):
    """Raise ValidationError if ``batch`` breaks a MetricBatch invariant."""
    if single_subject and len(set(batch.subject.tolist())) != 1:
        raise ValidationError("metric batch mixes subjects")
    if np.any(batch.anchor_view == batch.positive_view):
        raise ValidationError("anchor and positive share a view")
    for s in set(batch.subject.tolist()):
        f = np.sort(batch.frame[batch.subject == s])
        if np.any(np.diff(f) < max(min_temporal_gap, 1)):
            raise ValidationError("frames in metric batch are too close in time")


# -- distances, mining and losses ---------------------------------------------

def distance_matrix(anchors, positives):
    a = np.asarray(anchors, dtype=np.float64)
    p = np.asarray(positives, dtype=np.float64)
    if a.ndim != 2 or a.shape != p.shape:
        raise ValidationError(f"embedding batches must have equal (m, d) shapes: {a.shape} vs {p.shape}")
    return np.linalg.norm(a[:, None, :] - p[None, :, :], axis=-1)


@dataclass
class MiningResult:
    j_min: np.ndarray          # column of the hardest negative for anchor i, -1 if none
    k_min: np.ndarray          # row of the hardest negative for positive i, -1 if none
    d_min: np.ndarray          # min of the selected distances, nan if none
    negative_free: np.ndarray  # both candidate sets empty

    @property
    def frac_negative_free(self):
        return float(self.negative_free.mean()) if len(self.negative_free) else 0.0


def mine_hard_negatives(D, beta) -> MiningResult:
    """Closest in-batch negatives with distance > beta, lowest index on ties."""
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValidationError("distance matrix must be square")
    m = D.shape[0]
    cand = np.where((D > beta) & ~np.eye(m, dtype=bool), D, np.inf)
    j = np.argmin(cand, axis=1) if m else np.zeros(0, dtype=np.int64)
    k = np.argmin(cand, axis=0) if m else np.zeros(0, dtype=np.int64)
    rows = np.arange(m)
    dj = cand[rows, j] if m else np.zeros(0)
    dk = cand[k, rows] if m else np.zeros(0)
    has_j = np.isfinite(dj)
    has_k = np.isfinite(dk)
    d_min = np.minimum(dj, dk)
    d_min = np.where(has_j | has_k, d_min, np.nan)
    return MiningResult(np.where(has_j, j, -1), np.where(has_k, k, -1), d_min, ~(has_j | has_k))


def selected_negative(D, mining: MiningResult, i):
    """``(row, col)`` of the entry realising D_min for row ``i`` (ties go to j_min), or None."""
    j, k = mining.j_min[i], mining.k_min[i]
    if j < 0 and k < 0:
        return None
    if k < 0 or (j >= 0 and D[i, j] <= D[k, i]):
        return (i, int(j))
    return (int(k), i)


def contrastive_loss(D, mining: MiningResult, alpha):
    """Mean over rows of D(i,i) + max(0, alpha - D_min^i); returns ``(loss, dL/dD)``."""
    D = np.asarray(D, dtype=np.float64)
    m = D.shape[0]
    grad = np.zeros_like(D)
    if m == 0:
        return 0.0, grad
    total = 0.0
    for i in range(m):
        total += D[i, i]
        grad[i, i] += 1.0 / m
        sel = selected_negative(D, mining, i)
        if sel is None:
            continue
        r, c = sel
        hinge = alpha - D[r, c]
        if hinge > 0:
            total += hinge
            grad[r, c] -= 1.0 / m
    return total / m, grad


def pose_loss(pred, target):
    """L1 norm over the 48 normalised coordinates, averaged over any batch axis.

    Returns ``(loss, dL/dpred)`` with subgradient 0 at exact equality.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValidationError(f"prediction/target shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    n = diff.size // diff.shape[-1]
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


@dataclass(frozen=True)
class TargetNormalizer:
    mean: np.ndarray  # (48,)
    std: np.ndarray   # (48,)

    def forward(self, poses):
        flat = np.asarray(poses, dtype=np.float64).reshape(*np.shape(poses)[:-2], -1)
        return (flat - self.mean) / self.std

    def inverse(self, x):
        x = np.asarray(x, dtype=np.float64)
        return (x * self.std + self.mean).reshape(*x.shape[:-1], geo.N_JOINTS, 3)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))

    @classmethod
    def identity(cls):
        return cls(np.zeros(3 * geo.N_JOINTS), np.ones(3 * geo.N_JOINTS))


def normalize_targets(poses) -> TargetNormalizer:
    """Per-coordinate mean / std over labelled canonical poses; std floored at 1e-6."""
    flat = np.asarray(poses, dtype=np.float64).reshape(len(poses), -1)
    if len(flat) < 2:
        raise InsufficientDataError(f"need >= 2 labelled poses for target statistics, got {len(flat)}")
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), STD_FLOOR)
    return TargetNormalizer(mean, std)


# -- joint objective -----------------------------------------------------------

def _check_unit(emb):
    dev = np.abs(np.linalg.norm(emb, axis=1) - 1.0)
    if dev.size and dev.max() > UNIT_NORM_TOL:
        raise NumericError(f"embedding norm deviates from 1 by {dev.max():.3g}")


def joint_objective(enc_spec, enc, head_spec, head, anchors, positives, reg_obs, reg_targets,
                    alpha, beta, lambda_pose=1.0):
    """Loss and gradients for one combined step.

    Either batch may be empty (``None``). Returns a dict with ``loss``,
    ``loss_cnstr``, ``loss_pose``, ``enc_grads``, ``head_grads``, ``mining``
    and ``signature`` (all discrete choices made, for kink detection).
    """
    parts = []
    m = 0 if anchors is None else len(anchors)
    r = 0 if reg_obs is None else len(reg_obs)
    if m:
        parts += [anchors, positives]
    if r:
        parts.append(reg_obs)
    x = np.concatenate(parts, axis=0)
    emb, cache = nn.forward(enc_spec, enc, x)
    _check_unit(emb)
    d_emb = np.zeros_like(emb)
    out = {"loss_cnstr": 0.0, "loss_pose": 0.0, "mining": None, "D": None}
    sig = [tuple(np.flatnonzero(np.concatenate([(z > 0).ravel() for z in cache["pre"]])))]
    if m:
        A, P = emb[:m], emb[m:2 * m]
        D = distance_matrix(A, P)
        mining = mine_hard_negatives(D, beta)
        loss_c, dD = contrastive_loss(D, mining, alpha)
        safe = np.where(D > 0, D, 1.0)
        G = np.where(D > 0, dD / safe, 0.0)
        d_emb[:m] = G.sum(axis=1)[:, None] * A - G @ P
        d_emb[m:2 * m] = G.sum(axis=0)[:, None] * P - G.T @ A
        out.update(loss_cnstr=loss_c, mining=mining, D=D)
        sig += [tuple(mining.j_min), tuple(mining.k_min), tuple(np.flatnonzero(dD.ravel() < 0)),
                tuple(np.flatnonzero(dD.ravel() > 0))]
    head_grads = nn.zeros_like(head)
    if r:
        pred, hcache = nn.forward(head_spec, head, emb[2 * m:])
        loss_p, dpred = pose_loss(pred, reg_targets)
        head_grads, d_h = nn.backward(head_spec, head, hcache, lambda_pose * dpred)
        d_emb[2 * m:] = d_h
        out["loss_pose"] = loss_p
        sig.append(tuple(np.sign(pred - reg_targets).astype(int).ravel()))
    enc_grads, _ = nn.backward(enc_spec, enc, cache, d_emb)
    out.update(loss=out["loss_cnstr"] + lambda_pose * out["loss_pose"], enc_grads=enc_grads,
               head_grads=head_grads, signature=tuple(sig), embeddings=emb)
    return out


# -- training loop -------------------------------------------------------------

@dataclass
class TrainLog:
    rows: list = field(default_factory=list)      # per iteration
    epochs: list = field(default_factory=list)    # per-epoch means
    negative_free_rows: int = 0

    COLUMNS = ("epoch", "iter", "loss_cnstr", "loss_pose", "lr", "frac_negative_free", "val_nmpjpe")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for row in self.rows:
            w.writerow([_fmt(row[c]) for c in self.COLUMNS])
        return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


@dataclass
class TrainResult:
    encoder_spec: nn.MlpSpec
    encoder: list
    head_spec: nn.MlpSpec
    head: list
    normalizer: TargetNormalizer
    log: TrainLog
    encoder_adam: nn.AdamState | None = None
    head_adam: nn.AdamState | None = None
    rng_state: dict | None = None
    epochs_done: int = 0


class TrainingAborted(NumericError):
    """Non-finite loss; ``dump`` holds the offending batch."""

    def __init__(self, message, dump):
        super().__init__(message)
        self.dump = dump


def canonical_targets(ds: Dataset) -> np.ndarray:
    return geo.canonical_transform_batch(ds.pose)[0] if len(ds) else np.zeros((0, geo.N_JOINTS, 3))


def predict_canonical(enc_spec, enc, head_spec, head, normalizer, obs, chunk=4096):
    out = []
    for s in range(0, len(obs), chunk):
        emb, _ = nn.forward(enc_spec, enc, obs[s:s + chunk])
        pred, _ = nn.forward(head_spec, head, emb)
        out.append(normalizer.inverse(pred))
    return np.concatenate(out) if out else np.zeros((0, geo.N_JOINTS, 3))


def evaluate_nmpjpe(result_or_parts, ds: Dataset):
    enc_spec, enc, head_spec, head, norm = result_or_parts
    pred = predict_canonical(enc_spec, enc, head_spec, head, norm, ds.obs)
    return float(np.mean(n_mpjpe(pred, canonical_targets(ds))))


def init_models(cfg: TrainConfig, rng):
    enc_spec = nn.encoder_spec(2 * geo.N_JOINTS, cfg.hidden, cfg.dim_phi)
    head_spec = nn.head_spec(cfg.dim_phi, 3 * geo.N_JOINTS)
    return enc_spec, nn.init_params(enc_spec, rng), head_spec, nn.init_params(head_spec, rng)


def train(dataset: Dataset, config: TrainConfig, progress=None) -> TrainResult:
    cfg = config
    cfg.validate()
    dataset.validate()
    train_ds, val_ds = holdout_split(dataset, cfg.val_fraction)
    subjects = list(cfg.supervision_subjects) or None
    labeled, _ = split_supervision(train_ds, cfg.supervision_fraction, subjects, seed=cfg.seed)
    if cfg.mode == "baseline" and len(labeled) == 0:
        raise ConfigError("supervision_fraction: baseline mode needs labelled frames")

    init_rng, rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    enc_spec, enc, head_spec, head = init_models(cfg, init_rng)

    # labelled units: one entry per (subject, frame) with the record rows of each view
    lab_targets = canonical_targets(labeled)
    unit_keys, unit_first = np.unique(np.stack([labeled.subject, labeled.frame], 1), axis=0,
                                      return_index=True)
    normalizer = (normalize_targets(lab_targets[unit_first]) if len(unit_first) >= 2
                  else TargetNormalizer.identity())
    lab_norm = normalizer.forward(lab_targets)
    unit_of = {tuple(k): i for i, k in enumerate(unit_keys.tolist())}
    unit_rows = [[] for _ in unit_keys]
    for row, key in enumerate(zip(labeled.subject.tolist(), labeled.frame.tolist())):
        unit_rows[unit_of[key]].append(row)

    use_metric = cfg.mode == "mcss"
    use_pose = len(unit_rows) > 0 and cfg.lambda_pose > 0
    metric_subjects = [None] if cfg.cross_subject_batches else train_ds.subject_ids
    n_metric_frames = sum(len(train_ds.frames_of(s)) for s in train_ds.subject_ids)
    iters = cfg.iters_per_epoch or max(1, math.ceil(n_metric_frames / cfg.metric_batch))

    enc_adam = nn.AdamState.for_params(enc, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                                       eps=cfg.adam_eps, lr=cfg.lr)
    head_adam = nn.AdamState.for_params(head, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                                        eps=cfg.adam_eps, lr=cfg.lr)
    tlog = TrainLog()

    def reg_batch():
        n = len(unit_rows)
        units = rng.choice(n, size=cfg.regression_batch, replace=n < cfg.regression_batch)
        rows = np.array([unit_rows[u][rng.integers(len(unit_rows[u]))] for u in units])
        return labeled.obs[rows], lab_norm[rows]

    for epoch in range(cfg.epochs):
        lr = nn.lr_schedule(epoch, cfg.lr, cfg.lr_drop, cfg.lr_drop_every)
        start = int(rng.integers(len(metric_subjects)))
        sums = np.zeros(3)
        for it in range(iters):
            anchors = positives = reg_obs = reg_t = None
            if use_metric:
                sid = metric_subjects[(start + it) % len(metric_subjects)]
                mb = build_metric_batch(train_ds, sid, cfg.metric_batch, cfg.min_temporal_gap, rng)
                anchors, positives = mb.anchors, mb.positives
            if use_pose:
                reg_obs, reg_t = reg_batch()
            if anchors is None and reg_obs is None:
                break
            if cfg.step_mode == "sum" or anchors is None or reg_obs is None:
                steps = [(anchors, positives, reg_obs, reg_t)]
            else:
                steps = [(anchors, positives, None, None), (None, None, reg_obs, reg_t)]
            loss_c = loss_p = 0.0
            frac_nf = 0.0
            for a, p, ro, rt in steps:
                res = joint_objective(enc_spec, enc, head_spec, head, a, p, ro, rt,
                                      cfg.alpha, cfg.beta, cfg.lambda_pose)
                if not np.isfinite(res["loss"]):
                    raise TrainingAborted(
                        f"non-finite loss at epoch {epoch} iter {it}",
                        {"anchors": a, "positives": p, "reg_obs": ro, "reg_targets": rt})
                if res["mining"] is not None:
                    mining, D = res["mining"], res["D"]
                    sel = [(i, j) for i, j in enumerate(mining.j_min) if j >= 0]
                    sel += [(k, i) for i, k in enumerate(mining.k_min) if k >= 0]
                    if any(D[r, c] <= cfg.beta for r, c in sel):
                        raise NumericError("mined negative within beta of its anchor")
                    frac_nf = mining.frac_negative_free
                    tlog.negative_free_rows += int(mining.negative_free.sum())
                enc_adam, enc = nn.adam_step(enc_adam, enc, res["enc_grads"], lr)
                if ro is not None:
                    head_adam, head = nn.adam_step(head_adam, head, res["head_grads"], lr)
                loss_c += res["loss_cnstr"]
                loss_p += res["loss_pose"]
            sums += (loss_c, loss_p, frac_nf)
            tlog.rows.append({"epoch": epoch, "iter": epoch * iters + it, "loss_cnstr": loss_c,
                              "loss_pose": loss_p, "lr": lr, "frac_negative_free": frac_nf,
                              "val_nmpjpe": None})
        val = None
        if len(val_ds) and use_pose:
            val = evaluate_nmpjpe((enc_spec, enc, head_spec, head, normalizer), val_ds)
            if tlog.rows:
                tlog.rows[-1]["val_nmpjpe"] = val
        summary = {"epoch": epoch, "loss_cnstr": sums[0] / iters, "loss_pose": sums[1] / iters,
                   "lr": lr, "frac_negative_free": sums[2] / iters, "val_nmpjpe": val}
        tlog.epochs.append(summary)
        log.info("epoch %d: cnstr %.4f pose %.4f val %s", epoch, summary["loss_cnstr"],
                 summary["loss_pose"], val)
        if progress is not None:
            progress(summary)

    return TrainResult(enc_spec, enc, head_spec, head, normalizer, tlog, enc_adam, head_adam,
                       rng.bit_generator.state, cfg.epochs)
