"""Cell likelihoods with the latent count summed out (one or two outcomes).

Given the latent rate ``r`` and detection probabilities ``p_a, p_b``, every
member of the census population independently falls in one of the classes
"latent and seen by both", "seen by a only", "seen by b only", or "not
seen" (latent or not). The observed pair ``(y_a, y_b)`` is then a sum over
the overlap ``m`` of multinomial terms, and the latent count is
``y_a + y_b - m`` plus a binomial draw over the unseen. Censored cells add
a sum over the admissible totals of the censored outcome.
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln

from .core import SurveillancePanel
from .likelihoods import censored_interval


class CellTable:
    """Configuration rows for a set of cells, grouped by local cell index."""

    def __init__(self, K: int, cell: np.ndarray, counts: np.ndarray, const: np.ndarray, P: np.ndarray):
        self.K = K
        self.cell = cell
        self.counts = counts
        self.const = const
        self.P = P
        self.n_cells = len(P)
        self.starts = np.flatnonzero(np.r_[True, cell[1:] != cell[:-1]])
        if len(self.starts) != self.n_cells:
            raise ValueError("a cell has no admissible configuration")
        self.unseen = counts[:, -1]
        self._counts_t = np.ascontiguousarray(counts.T)

    def _class_logprobs(self, logr, logp, log1mp):
        """Per-cell log probabilities of each detection class, ``(C, cells)``."""
        logr = np.ravel(logr)
        lp = np.reshape(logp, (self.K, -1))
        l1 = np.reshape(log1mp, (self.K, -1))
        # log(1 - r * (1 - prod(1 - p_k)))
        seen_any = -np.expm1(l1.sum(axis=0))
        unseen = np.log1p(-np.exp(logr) * seen_any)
        if self.K == 1:
            return np.stack([logr + lp[0], unseen])
        return np.stack([
            logr + lp[0] + lp[1],
            logr + lp[0] + l1[1],
            logr + l1[0] + lp[1],
            unseen,
        ])

    def _terms(self, logr, logp, log1mp):
        lc = self._class_logprobs(logr, logp, log1mp)[:, self.cell]
        return self.const + np.einsum("cg,cg->g", self._counts_t, lc)

    def loglik(self, logr, logp, log1mp) -> np.ndarray:
        """Flat ``(cells,)`` log P(observed outcomes | rates) with N summed out."""
        terms = self._terms(logr, logp, log1mp)
        mx = np.maximum.reduceat(terms, self.starts)
        s = np.add.reduceat(np.exp(terms - mx[self.cell]), self.starts)
        return mx + np.log(s)

    def draw_latent(self, rng: np.random.Generator, logr, logp, log1mp) -> np.ndarray:
        """Exact draw of every latent count from its conditional given the rates."""
        terms = self._terms(logr, logp, log1mp)
        g = terms + rng.gumbel(size=terms.shape)
        mx = np.maximum.reduceat(g, self.starts)
        hit = np.flatnonzero(g == mx[self.cell])
        _, first = np.unique(self.cell[hit], return_index=True)
        unseen = self.unseen[hit[first]]
        # probability that an unseen person is latent
        r = np.exp(np.ravel(logr))
        miss = np.exp(np.reshape(log1mp, (self.K, -1)).sum(axis=0))
        q = r * miss / (1.0 - r * (1.0 - miss))
        extra = rng.binomial(unseen.astype(np.int64), np.clip(q, 0.0, 1.0))
        return self.P - unseen + extra

    def subset(self, cells: np.ndarray) -> "CellTable":
        """Table for the given local cells, in increasing order."""
        cells = np.sort(np.asarray(cells, dtype=np.int64))
        rows = np.concatenate([np.arange(self.starts[c], self._end(c)) for c in cells])
        local = np.repeat(np.arange(len(cells)), [self._end(c) - self.starts[c] for c in cells])
        return CellTable(self.K, local, self.counts[rows], self.const[rows], self.P[cells])

    def _end(self, c):
        return self.starts[c + 1] if c + 1 < self.n_cells else len(self.cell)


class CollapsedCells(CellTable):
    """N-marginal cell likelihood for a whole panel.

    Each row of the table is one admissible configuration of a cell:
    counts per detection class plus a constant multinomial coefficient.
    Rows are grouped by cell (flat index ``i * T + t``); ``loglik`` and
    ``draw_latent`` take and return ``(n, T)`` arrays.
    """

    def __init__(self, panel: SurveillancePanel):
        K = panel.n_outcomes
        if K not in (1, 2):
            raise ValueError("collapsed cell likelihood supports one or two outcomes")
        n, T = panel.populations.shape
        self.shape = (n, T)
        P = panel.populations.ravel().astype(np.int64)
        Y = panel.counts.reshape(K, -1)
        codes = panel.censor_codes.ravel() if panel.censor_codes is not None else np.zeros(n * T, dtype=np.int64)
        ck = panel.censored_outcome if panel.censor_codes is not None else 0

        cells, counts = [], []
        for c in range(n * T):
            lo, hi = censored_interval(Y[ck, c], codes[c])
            ya_vals = np.arange(int(lo), int(hi) + 1)
            if K == 1:
                ya_vals = ya_vals[ya_vals <= P[c]]
                cfg = np.stack([ya_vals, P[c] - ya_vals], axis=1)
            else:
                yb = int(Y[1 - ck, c])
                rows = []
                for ya in ya_vals:
                    m = np.arange(max(0, ya + yb - P[c]), min(ya, yb) + 1)
                    rows.append(np.stack([m, ya - m, yb - m, P[c] - ya - yb + m], axis=1))
                cfg = np.concatenate(rows) if rows else np.zeros((0, 4), dtype=np.int64)
                if ck == 1:
                    # class order is (both, first outcome only, second only, unseen)
                    cfg = cfg[:, [0, 2, 1, 3]]
            cells.append(np.full(len(cfg), c))
            counts.append(cfg)
        cell = np.concatenate(cells)
        counts = np.concatenate(counts).astype(float)
        Pf = P.astype(float)
        const = gammaln(Pf[cell] + 1.0) - gammaln(counts + 1.0).sum(axis=1)
        super().__init__(K, cell, counts, const, Pf)

    def loglik(self, logr, logp, log1mp) -> np.ndarray:
        return super().loglik(logr, logp, log1mp).reshape(self.shape)

    def draw_latent(self, rng, logr, logp, log1mp) -> np.ndarray:
        return super().draw_latent(rng, logr, logp, log1mp).reshape(self.shape)
