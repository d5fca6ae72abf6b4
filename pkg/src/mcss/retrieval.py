"""Cross-view pose retrieval benchmark and embedding/pose-distance correlation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from . import geometry as geo
from . import neural as nn
from .errors import InsufficientCandidatesError, InvalidArgumentError, NumericError
from .metrics import mpjpe, pa_mpjpe

FILTERS = ("cross-view", "cross-subject")
UNIT_TOL = 1e-9


@dataclass(frozen=True)
class EmbeddingIndex:
    """Entries sorted by (subject, view, frame)."""
    emb: np.ndarray
    subject: np.ndarray
    view: np.ndarray
    frame: np.ndarray
    pose: np.ndarray            # root-relative world pose
    pose_canonical: np.ndarray

    def __len__(self):
        return len(self.subject)

    def check(self):
        if len(self) == 0:
            return
        dev = np.abs(np.linalg.norm(self.emb, axis=1) - 1).max()
        if dev > UNIT_TOL:
            raise NumericError(f"index embedding norm deviates from 1 by {dev:.3g}")
        canon, _ = geo.canonical_transform_batch(self.pose)
        if np.abs(canon - self.pose_canonical).max() > 1e-9:
            raise NumericError("index canonical poses inconsistent with canonical_transform")

    def unique_poses(self):
        """(poses of distinct (subject, frame) pairs, per-entry index into them)."""
        keys = np.stack([self.subject, self.frame], axis=1)
        _, first, inv = np.unique(keys, axis=0, return_index=True, return_inverse=True)
        return self.pose[first], inv.ravel()


def build_index(dataset, enc_spec, enc, batch=4096) -> EmbeddingIndex:
    if enc_spec.widths[0] != 2 * geo.N_JOINTS:
        raise InvalidArgumentError(f"encoder expects {enc_spec.widths[0]} inputs, observations have 32")
    order = np.lexsort((dataset.frame, dataset.view, dataset.subject))
    obs = dataset.obs[order]
    dim = enc_spec.widths[-1]
    emb = np.empty((len(order), dim))
    for lo in range(0, len(order), batch):
        emb[lo:lo + batch] = nn.forward(enc_spec, enc, obs[lo:lo + batch])[0]
    pose = np.array(dataset.pose[order])
    canon = geo.canonical_transform_batch(pose)[0] if len(pose) else pose.copy()
    cols = [emb, dataset.subject[order], dataset.view[order], dataset.frame[order], pose, canon]
    for c in cols:
        c.setflags(write=False)
    return EmbeddingIndex(*cols)


def _pool_mask(index, q, filt):
    if filt not in FILTERS:
        raise InvalidArgumentError(f"unknown filter {filt!r}; expected one of {FILTERS}")
    mask = index.view != index.view[q]
    if filt == "cross-subject":
        mask &= index.subject != index.subject[q]
    return mask


def retrieve(index: EmbeddingIndex, q: int, K: int, filt="cross-view"):
    """Indices of the K embedding-nearest entries passing ``filt``, nearest first."""
    mask = _pool_mask(index, q, filt)
    pool = np.flatnonzero(mask)
    if len(pool) < K:
        raise InsufficientCandidatesError(
            f"query {q}: only {len(pool)} candidates pass filter {filt}, need K={K}")
    d = np.linalg.norm(index.emb[pool] - index.emb[q], axis=1)
    return pool[np.argsort(d, kind="stable")[:K]]


def pairwise_pa(poses, chunk=20000):
    """PA-MPJPE of every pose (aligned) against every pose (reference): out[i, j] = pa(poses[j] -> poses[i])."""
    n = len(poses)
    out = np.empty((n, n))
    ii, jj = np.divmod(np.arange(n * n), n)
    flat = out.reshape(-1)
    for lo in range(0, n * n, chunk):
        a, b = ii[lo:lo + chunk], jj[lo:lo + chunk]
        flat[lo:lo + chunk] = pa_mpjpe(poses[b], poses[a], check=False)
    return out


@dataclass
class RetrievalRun:
    """Per-query mean PA-MPJPE for each K, plus the retrieved ids at max K."""
    ks: tuple
    filt: str
    queries: np.ndarray
    model: np.ndarray       # (n_queries, len(ks))
    oracle: np.ndarray
    neighbors: np.ndarray   # (n_queries, max K)


def run_retrieval(index: EmbeddingIndex, queries=None, ks=(1, 5, 10, 20), filt="cross-view",
                  pa_table=None, chunk=16) -> RetrievalRun:
    ks = tuple(int(k) for k in ks)
    if not ks or min(ks) < 1:
        raise InvalidArgumentError("K values must be >= 1")
    queries = np.arange(len(index)) if queries is None else np.asarray(queries, dtype=np.int64)
    kmax = max(ks)
    if pa_table is None:
        pa_table = pairwise_pa(*index.unique_poses()[:1])
    _, uid = index.unique_poses()
    model = np.empty((len(queries), len(ks)))
    oracle = np.empty_like(model)
    nbrs = np.empty((len(queries), kmax), dtype=np.int64)
    for lo in range(0, len(queries), chunk):
        qs = queries[lo:lo + chunk]
        mask = np.stack([_pool_mask(index, q, filt) for q in qs])
        short = np.flatnonzero(mask.sum(axis=1) < kmax)
        if short.size:
            q = qs[short[0]]
            raise InsufficientCandidatesError(
                f"query {q}: only {mask[short[0]].sum()} candidates pass filter {filt}, need K={kmax}")
        # direct differences, so values match retrieve() exactly; ties resolve by entry order
        d = np.linalg.norm(index.emb[None, :, :] - index.emb[qs, None, :], axis=2)
        d[~mask] = np.inf
        top = np.argsort(d, axis=1, kind="stable")[:, :kmax]
        nbrs[lo:lo + len(qs)] = top
        pa = pa_table[uid[qs][:, None], uid[None, :]]
        got = np.take_along_axis(pa, top, axis=1)
        pa[~mask] = np.inf
        best = np.sort(np.partition(pa, kmax - 1, axis=1)[:, :kmax], axis=1)
        for c, k in enumerate(ks):
            model[lo:lo + len(qs), c] = np.sort(got[:, :k], axis=1).sum(axis=1) / k
            oracle[lo:lo + len(qs), c] = best[:, :k].sum(axis=1) / k
    return RetrievalRun(ks, filt, queries, model, oracle, nbrs)


def mean_pa_mpjpe_at_k(index, queries, K, filt="cross-view", use_oracle=False, pa_table=None):
    run = run_retrieval(index, queries, (K,), filt, pa_table)
    vals = run.oracle if use_oracle else run.model
    return float(vals.mean()) if len(vals) else math.nan


@dataclass(frozen=True)
class ReportRow:
    K: int
    filter: str
    model_pampjpe_mm: float
    oracle_pampjpe_mm: float
    delta_mm: float
    n_queries: int


REPORT_COLUMNS = ("K", "filter", "model_pampjpe_mm", "oracle_pampjpe_mm", "delta_mm", "n_queries")


def report_rows(run: RetrievalRun, oracle_only=False):
    rows = []
    for c, k in enumerate(run.ks):
        o = float(run.oracle[:, c].mean())
        m = math.nan if oracle_only else float(run.model[:, c].mean())
        rows.append(ReportRow(k, run.filt, m, o, m - o, len(run.queries)))
    return rows


def _cell(x):
    if isinstance(x, float):
        return "" if math.isnan(x) else format(x, ".17g")
    return str(x)


def rows_to_csv(rows, columns) -> str:
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(_cell(getattr(r, c) if not isinstance(r, dict) else r[c]) for c in columns))
    return "\n".join(lines) + "\n"


def report_csv(rows) -> str:
    return rows_to_csv(rows, REPORT_COLUMNS)


# -- correlation ----------------------------------------------------------------

CORR_COLUMNS = ("bin_lo_mm", "bin_hi_mm", "mean_dist_same_view", "mean_dist_diff_view", "n_same", "n_diff")


@dataclass
class CorrelationReport:
    edges: np.ndarray
    mean_same: np.ndarray   # NaN for empty bins
    mean_diff: np.ndarray
    n_same: np.ndarray
    n_diff: np.ndarray
    rho_same: float
    rho_diff: float

    def to_csv(self) -> str:
        rows = [dict(bin_lo_mm=float(self.edges[b]), bin_hi_mm=float(self.edges[b + 1]),
                     mean_dist_same_view=float(self.mean_same[b]),
                     mean_dist_diff_view=float(self.mean_diff[b]),
                     n_same=int(self.n_same[b]), n_diff=int(self.n_diff[b]))
                for b in range(len(self.n_same))]
        body = rows_to_csv(rows, CORR_COLUMNS)
        return body + f"spearman_rho,,{_cell(self.rho_same)},{_cell(self.rho_diff)},,\n"


def _spearman(mid, vals):
    ok = ~np.isnan(vals)
    if ok.sum() < 2 or np.ptp(vals[ok]) == 0:
        return math.nan
    return float(spearmanr(mid[ok], vals[ok]).statistic)


def correlation_report(index: EmbeddingIndex, n_queries=200, bins=10, rng=None,
                       upper_percentile=95.0) -> CorrelationReport:
    """Mean embedding distance per canonical-MPJPE bin, same-view vs different-view candidates.

    ``bins`` is a bin count (uniform over [0, percentile]) or explicit monotone edges.
    """
    if len(index) == 0:
        raise InvalidArgumentError("correlation report needs a non-empty index")
    rng = np.random.default_rng(0) if rng is None else rng
    n_queries = min(n_queries, len(index))
    queries = np.sort(rng.choice(len(index), size=n_queries, replace=False))
    pose_d, emb_d, same = [], [], []
    for q in queries:
        cand = np.flatnonzero((index.subject == index.subject[q]) & (np.arange(len(index)) != q))
        ref = np.broadcast_to(index.pose_canonical[q], (len(cand), geo.N_JOINTS, 3))
        pose_d.append(mpjpe(index.pose_canonical[cand], ref))
        emb_d.append(np.linalg.norm(index.emb[cand] - index.emb[q], axis=1))
        same.append(index.view[cand] == index.view[q])
    pose_d, emb_d, same = (np.concatenate(x) if x else np.empty(0) for x in (pose_d, emb_d, same))
    if np.ndim(bins) == 0:
        hi = float(np.percentile(pose_d, upper_percentile)) if pose_d.size else 0.0
        edges = np.linspace(0.0, hi, int(bins) + 1) if hi > 0 else np.array([0.0, 0.0])
    else:
        edges = np.asarray(bins, dtype=np.float64)
        if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) < 0):
            raise InvalidArgumentError("bin edges must be a monotone sequence of length >= 2")
    nb = len(edges) - 1
    keep = (pose_d >= edges[0]) & (pose_d <= edges[-1])
    b = np.clip(np.searchsorted(edges, pose_d[keep], side="right") - 1, 0, nb - 1)
    e, s = emb_d[keep], same[keep]
    out = {}
    for name, sel in (("same", s), ("diff", ~s)):
        cnt = np.bincount(b[sel], minlength=nb)
        tot = np.bincount(b[sel], weights=e[sel], minlength=nb)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[name] = (np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan), cnt)
    mid = 0.5 * (edges[:-1] + edges[1:])
    return CorrelationReport(edges, out["same"][0], out["diff"][0], out["same"][1], out["diff"][1],
                             _spearman(mid, out["same"][0]), _spearman(mid, out["diff"][0]))
