"""Output layers: hierarchical retrieve-and-rerank search, beam and
diverse beam search, top-k/top-p sampling, the argmax classification
shortcut, and perplexity. Every accelerated routine has an exhaustive
counterpart that computes full-vocabulary probabilities and sorts them;
the hierarchical path must match it token for token.

Retrieve works per beam: tokens are divided into ``k`` groups by a
deterministic stride (token ``i`` to group ``i % k``), the group maxima
``m_i`` are reduced to a threshold ``R = min_i m_i``, and every logit
``>= R`` survives. ``R`` is a lower bound on the k-th largest logit, so
the survivors always contain the true top-k; because the comparison is
inclusive, ties at the threshold cannot evict a true top-k token. The
same kernel call computes the full-vocabulary logsumexp, so reranked
log-probabilities are exact rather than renormalized over candidates.
The deterministic stride (instead of a random partition) keeps regression
tests exact; the superset guarantee holds for any partition into k
nonempty groups.

Tie-breaking everywhere: higher score first, then lower token id, then
lower beam index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DimensionError, ParameterError
from .tensor import OpCounters, as_array, global_counters

F32 = np.float32


def _ctr(counters) -> OpCounters:
    return counters if counters is not None else global_counters()


def logsumexp(row) -> float:
    """log(sum(exp(row))) via max shift; stable for large magnitudes."""
    r = np.asarray(row, dtype=np.float64)
    m = r.max()
    return float(m + np.log(np.exp(r - m).sum()))


@dataclass
class RetrieveResult:
    """Survivors of the grouped-maximum threshold pass, one set per beam."""

    group_maxima: np.ndarray                 # [beams, k]
    threshold: np.ndarray                    # [beams]
    candidate_tokens: list[np.ndarray]       # per beam, int32 token ids
    candidate_logits: list[np.ndarray]       # per beam, float32 logits
    logsumexp_full: np.ndarray               # [beams], float64


def retrieve(logits, k: int, *, counters: OpCounters | None = None,
             bufs: dict | None = None) -> RetrieveResult:
    """One kernel call per step: group maxima, threshold, full-vocabulary
    logsumexp, and candidate selection, without materializing any
    vocabulary-sized intermediate."""
    L = as_array(logits)
    if L.ndim != 2:
        raise DimensionError(f"logits must be [beams, vocab], got {L.shape}")
    beams, vocab = L.shape
    if not 1 <= k <= vocab:
        raise ParameterError(f"group count {k} outside [1, vocab={vocab}]")
    if L.dtype != np.float32:
        L = L.astype(np.float32)

    if bufs is None:
        gm = np.empty((beams, k), F32)
        th = np.empty(beams, F32)
        lse = np.empty(beams, np.float64)
        ci = np.empty((beams, vocab), np.int32)
    else:
        gm, th, lse, ci = bufs["group_max"], bufs["threshold"], bufs["lse"], bufs["cand_idx"]
        gm = gm[:beams, :k]
        th, lse, ci = th[:beams], lse[:beams], ci[:beams, :vocab]
    cc = np.empty(beams, np.int64)
    kernels.retrieve_kernel(L, k, gm, th, lse, ci, cc)
    _ctr(counters).count_fused("retrieve", L.nbytes)

    cand_tokens, cand_logits = [], []
    for b in range(beams):
        idx = ci[b, :cc[b]].copy()
        cand_tokens.append(idx)
        cand_logits.append(L[b, idx])
    return RetrieveResult(group_maxima=gm, threshold=th,
                          candidate_tokens=cand_tokens, candidate_logits=cand_logits,
                          logsumexp_full=lse)


# ---------------------------------------------------------------------------
# decoding configuration and beam state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecodeConfig:
    method: str = "beam"              # beam | diverse_beam | top_k | top_p | greedy
    beam_size: int = 4
    diversity_groups: int = 1
    diversity_penalty: float = 0.0
    sample_k: int = 1
    sample_p: float = 1.0
    length_penalty: float = 0.0
    max_steps: int = 32
    eos_token: int = 2
    seed: int = 0

    def validate(self, vocab_size: int, max_beam_size: int):
        if self.method not in ("beam", "diverse_beam", "top_k", "top_p", "greedy"):
            raise ParameterError(f"unknown decode method {self.method!r}")
        k = self.effective_beam_size
        if not 1 <= k <= max_beam_size:
            raise ParameterError(f"beam size {k} outside [1, {max_beam_size}]")
        if not 1 <= self.sample_k <= vocab_size:
            raise ParameterError(f"sample_k {self.sample_k} outside [1, {vocab_size}]")
        if not 0.0 < self.sample_p <= 1.0:
            raise ParameterError(f"sample_p {self.sample_p} outside (0, 1]")
        if self.diversity_penalty < 0:
            raise ParameterError("diversity penalty must be >= 0")
        if self.length_penalty < 0:
            raise ParameterError("length penalty must be >= 0")
        if self.method == "diverse_beam":
            if self.diversity_groups < 1 or k % self.diversity_groups:
                raise ParameterError(
                    f"beam size {k} not divisible by {self.diversity_groups} groups")
        if not 0 <= self.eos_token < vocab_size:
            raise ParameterError(f"eos token {self.eos_token} outside vocabulary")
        if self.max_steps < 1:
            raise ParameterError("max_steps must be >= 1")

    @property
    def effective_beam_size(self) -> int:
        return 1 if self.method in ("greedy", "top_k", "top_p") else self.beam_size


@dataclass
class BeamState:
    """Live beams (score-sorted), finished hypotheses, and the bookkeeping
    the engine needs to reorder KV caches."""

    prefixes: list[list[int]] = field(default_factory=lambda: [[]])
    cum_log_prob: list[float] = field(default_factory=lambda: [0.0])
    finished: list[tuple[list[int], float]] = field(default_factory=list)
    step: int = 0
    parents: list[int] = field(default_factory=lambda: [0])
    last_tokens: list[int] = field(default_factory=list)
    chosen_tokens: list[int] = field(default_factory=list)

    @property
    def live(self) -> int:
        return len(self.prefixes)

    def next_input_tokens(self, bos: int) -> list[int]:
        return [p[-1] if p else bos for p in self.prefixes]

    def should_stop(self, config: DecodeConfig) -> bool:
        if not self.prefixes:
            return True
        k = config.effective_beam_size
        if len(self.finished) < k:
            return False
        alpha = config.length_penalty
        best_live = max(self.cum_log_prob)
        if alpha:
            # optimistic score at the current length; heuristic for alpha > 0
            best_live = best_live / max(self.step, 1) ** alpha
        return best_live <= self.finished[k - 1][1]

    def finalize(self, config: DecodeConfig) -> list[tuple[list[int], float]]:
        """Best-first hypotheses; unfinished live beams are scored as-is."""
        out = list(self.finished)
        have = {tuple(seq) for seq, _ in out}
        alpha = config.length_penalty
        for p, c in zip(self.prefixes, self.cum_log_prob):
            if p and tuple(p) not in have:
                score = c / (len(p) ** alpha) if alpha else c
                out.append((p, score))
        out.sort(key=lambda h: (-h[1], h[0]))
        return out[:config.effective_beam_size]


def _finished_insert(finished: list, seq: list[int], score: float, cap: int):
    finished.append((seq, score))
    finished.sort(key=lambda h: (-h[1], h[0]))
    del finished[cap:]


def _apply_selection(state: BeamState, picks: list[tuple[float, int, int]],
                     eos: int, alpha: float, k: int) -> BeamState:
    """Build the next state from score-ordered (cum_log_prob, token, parent)
    picks: EOS moves a hypothesis to finished, others stay live, walking
    until k live beams are filled or picks run out."""
    new = BeamState(prefixes=[], cum_log_prob=[], finished=list(state.finished),
                    step=state.step + 1, parents=[], last_tokens=[], chosen_tokens=[])
    length = state.step + 1
    for cum, tok, parent in picks:
        if tok == eos:
            seq = state.prefixes[parent] + [tok]
            score = cum / (length ** alpha) if alpha else cum
            _finished_insert(new.finished, seq, score, k)
            new.chosen_tokens.append(tok)
        elif len(new.prefixes) < k:
            new.prefixes.append(state.prefixes[parent] + [tok])
            new.cum_log_prob.append(cum)
            new.parents.append(parent)
            new.last_tokens.append(tok)
            new.chosen_tokens.append(tok)
        if len(new.prefixes) >= k:
            break
    return new


def beam_search_step(state: BeamState, logits, config: DecodeConfig, *,
                     counters: OpCounters | None = None,
                     bufs: dict | None = None) -> BeamState:
    """One hierarchical beam step: retrieve per-beam candidates, rerank
    them with exact log-probabilities, select the next beams. The result
    is identical to :func:`exhaustive_beam_search_step` on the same
    logits."""
    L = as_array(logits)
    k = config.effective_beam_size
    if L.shape[0] != state.live:
        raise DimensionError(f"logits rows {L.shape[0]} != live beams {state.live}")
    # selection walks at most k live picks plus one EOS ride per beam, so
    # per-beam candidates must cover the top-(k + live)
    groups = min(k + state.live, L.shape[1])
    rr = retrieve(L, groups, counters=counters, bufs=bufs)

    cands: list[tuple[float, int, int]] = []
    for b in range(state.live):
        base = state.cum_log_prob[b]
        lse = float(rr.logsumexp_full[b])
        for tok, lg in zip(rr.candidate_tokens[b], rr.candidate_logits[b]):
            cands.append((base + (float(lg) - lse), int(tok), b))
    cands.sort(key=lambda c: (-c[0], c[1], c[2]))
    return _apply_selection(state, cands, config.eos_token, config.length_penalty, k)


def exhaustive_beam_search_step(state: BeamState, logits, config: DecodeConfig, *,
                                counters: OpCounters | None = None) -> BeamState:
    """Reference beam step: full softmax over the vocabulary written out,
    then a full sort over every beam-token pair (two vocabulary-sized
    passes, counted as naive)."""
    L = as_array(logits).astype(np.float64)
    k = config.effective_beam_size
    if L.shape[0] != state.live:
        raise DimensionError(f"logits rows {L.shape[0]} != live beams {state.live}")
    m = L.max(axis=1, keepdims=True)
    logprobs = L - (m + np.log(np.exp(L - m).sum(axis=1, keepdims=True)))
    _ctr(counters).count_naive("softmax_full", 1, L.nbytes)

    scores = np.asarray(state.cum_log_prob, dtype=np.float64)[:, None] + logprobs
    # token-major flattening makes a stable sort break ties by (token, beam)
    flat = scores.T.ravel()
    order = np.argsort(-flat, kind="stable")
    _ctr(counters).count_naive("sort_full", 1, flat.nbytes)

    live = state.live
    picks = []
    need = k + live  # k live picks plus at most one EOS ride per beam
    for idx in order[:need]:
        picks.append((float(flat[idx]), int(idx // live), int(idx % live)))
    return _apply_selection(state, picks, config.eos_token, config.length_penalty, k)


# ---------------------------------------------------------------------------
# diverse beam search
# ---------------------------------------------------------------------------

def _diverse_step(state: BeamState, logits, config: DecodeConfig, substep, *,
                  counters=None, bufs=None) -> BeamState:
    """Shared-pool diverse step: groups pick in sequence from all live
    beams' candidates; each group sees logits penalized by
    ``lambda * count(token chosen by earlier groups this step)`` and skips
    beam-token pairs already taken. With zero penalty the union of picks
    is exactly the plain beam-search selection."""
    L = as_array(logits)
    k = config.effective_beam_size
    G = config.diversity_groups
    kg = k // G
    lam = config.diversity_penalty
    vocab = L.shape[1]
    counts = np.zeros(vocab, np.int32)
    taken: set[tuple[int, int]] = set()
    all_picks: list[tuple[float, int, int]] = []

    for g in range(G):
        if lam and counts.any():
            pen = np.empty_like(L)
            kernels.penalize_counts_kernel(L, counts, lam, pen)
            _ctr(counters).count_fused("diversity_penalty", L.nbytes)
        else:
            pen = L
        picks = substep(state, pen, kg, taken, config.eos_token,
                        counters=counters, bufs=bufs)
        for cum, tok, parent in picks:
            taken.add((parent, tok))
            counts[tok] += 1
            all_picks.append((cum, tok, parent))
    # groups keep their own picks in order; EOS handling is shared
    return _apply_selection(state, all_picks, config.eos_token,
                            config.length_penalty, k)


def _hars_group_picks(state, logits, kg, taken, eos, *, counters=None, bufs=None):
    # every beam's top-(taken + kg + live) must survive: earlier groups
    # consumed at most len(taken) pairs, EOS rides at most once per beam
    depth = len(taken) + kg + state.live
    groups = min(depth, logits.shape[1])
    rr = retrieve(logits, groups, counters=counters, bufs=bufs)
    cands = []
    for b in range(state.live):
        base = state.cum_log_prob[b]
        lse = float(rr.logsumexp_full[b])
        for tok, lg in zip(rr.candidate_tokens[b], rr.candidate_logits[b]):
            if (b, int(tok)) not in taken:
                cands.append((base + (float(lg) - lse), int(tok), b))
    cands.sort(key=lambda c: (-c[0], c[1], c[2]))
    return _walk_group(cands, kg, eos)


def _exhaustive_group_picks(state, logits, kg, taken, eos, *, counters=None, bufs=None):
    L = as_array(logits).astype(np.float64)
    m = L.max(axis=1, keepdims=True)
    logprobs = L - (m + np.log(np.exp(L - m).sum(axis=1, keepdims=True)))
    _ctr(counters).count_naive("softmax_full", 1, L.nbytes)
    scores = np.asarray(state.cum_log_prob, dtype=np.float64)[:, None] + logprobs
    flat = scores.T.ravel()
    order = np.argsort(-flat, kind="stable")
    _ctr(counters).count_naive("sort_full", 1, flat.nbytes)
    live = state.live
    cands = []
    for idx in order:
        b = int(idx % live)
        tok = int(idx // live)
        if (b, tok) not in taken:
            cands.append((float(flat[idx]), tok, b))
        if len(cands) >= kg + live:
            break
    return _walk_group(cands, kg, eos)


def _walk_group(cands, kg, eos):
    """Walk score-ordered candidates until kg non-EOS picks; EOS picks ride
    along (they become finished hypotheses). EOS appears at most once per
    beam, so the walk consumes at most live extra entries."""
    picks = []
    non_eos = 0
    for cum, tok, parent in cands:
        picks.append((cum, tok, parent))
        if tok != eos:
            non_eos += 1
            if non_eos >= kg:
                break
    return picks


def diverse_beam_search_step(state: BeamState, logits, config: DecodeConfig, *,
                             counters=None, bufs=None) -> BeamState:
    return _diverse_step(state, logits, config, _hars_group_picks,
                         counters=counters, bufs=bufs)


def exhaustive_diverse_beam_search_step(state: BeamState, logits, config: DecodeConfig, *,
                                        counters=None) -> BeamState:
    return _diverse_step(state, logits, config, _exhaustive_group_picks,
                         counters=counters)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _draw(tokens, probs, rng) -> int:
    """Inverse-CDF draw over a small renormalized candidate set."""
    r = rng.random() * probs.sum()
    c = 0.0
    for t, p in zip(tokens, probs):
        c += p
        if r <= c:
            return int(t)
    return int(tokens[-1])


def _sorted_prefix(rr: RetrieveResult, beam: int = 0):
    """Retrieve survivors are exactly the top-|C| tokens of the vocabulary;
    sort them (logit desc, token asc) to obtain the head of the full
    probability-sorted order."""
    toks = rr.candidate_tokens[beam]
    lgs = rr.candidate_logits[beam]
    order = np.lexsort((toks, -lgs.astype(np.float64)))
    return toks[order], lgs[order]


def sample_top_k(logits_row, k: int, rng, *, counters=None, bufs=None) -> int:
    """Draw from the renormalized true top-k set (retrieve-accelerated)."""
    row = np.atleast_2d(as_array(logits_row))
    vocab = row.shape[1]
    if not 1 <= k <= vocab:
        raise ParameterError(f"top-k {k} outside [1, {vocab}]")
    rr = retrieve(row, min(k, vocab), counters=counters, bufs=bufs)
    toks, lgs = _sorted_prefix(rr)
    toks, lgs = toks[:k], lgs[:k]
    probs = np.exp(lgs.astype(np.float64) - rr.logsumexp_full[0])
    return _draw(toks, probs, rng)


def sample_top_p(logits_row, p: float, rng, *, counters=None, bufs=None) -> int:
    """Nucleus draw: the smallest probability-sorted prefix with cumulative
    mass >= p. Retrieve escalates its group count until the survivors hold
    the nucleus; the nucleus always contains the argmax."""
    if not 0.0 < p <= 1.0:
        raise ParameterError(f"top-p {p} outside (0, 1]")
    row = np.atleast_2d(as_array(logits_row))
    vocab = row.shape[1]
    groups = min(32, vocab)
    while True:
        rr = retrieve(row, groups, counters=counters, bufs=bufs)
        toks, lgs = _sorted_prefix(rr)
        probs = np.exp(lgs.astype(np.float64) - rr.logsumexp_full[0])
        cum = np.cumsum(probs)
        if cum.size and (cum[-1] >= p or groups == vocab):
            cut = int(np.searchsorted(cum, p, side="left"))
            cut = min(cut, cum.size - 1)
            return _draw(toks[:cut + 1], probs[:cut + 1], rng)
        groups = min(groups * 8, vocab)


def naive_sample_top_k(logits_row, k: int, rng, *, counters=None) -> int:
    """Exhaustive counterpart: full softmax plus full sort."""
    row = np.asarray(as_array(logits_row), dtype=np.float64).reshape(-1)
    if not 1 <= k <= row.size:
        raise ParameterError(f"top-k {k} outside [1, {row.size}]")
    lse = logsumexp(row)
    probs = np.exp(row - lse)
    _ctr(counters).count_naive("softmax_full", 1, row.nbytes)
    order = np.lexsort((np.arange(row.size), -row))
    _ctr(counters).count_naive("sort_full", 1, row.nbytes)
    top = order[:k]
    return _draw(top, probs[top], rng)


def naive_sample_top_p(logits_row, p: float, rng, *, counters=None) -> int:
    if not 0.0 < p <= 1.0:
        raise ParameterError(f"top-p {p} outside (0, 1]")
    row = np.asarray(as_array(logits_row), dtype=np.float64).reshape(-1)
    lse = logsumexp(row)
    probs = np.exp(row - lse)
    _ctr(counters).count_naive("softmax_full", 1, row.nbytes)
    order = np.lexsort((np.arange(row.size), -row))
    _ctr(counters).count_naive("sort_full", 1, row.nbytes)
    cum = np.cumsum(probs[order])
    cut = int(np.searchsorted(cum, p, side="left"))
    cut = min(cut, order.size - 1)
    nucleus = order[:cut + 1]
    return _draw(nucleus, probs[nucleus], rng)


def nucleus_set(logits_row, p: float) -> set[int]:
    """The exact nucleus (sorted-prefix) token set; exposed for tests and
    membership checks."""
    row = np.asarray(as_array(logits_row), dtype=np.float64).reshape(-1)
    probs = np.exp(row - logsumexp(row))
    order = np.lexsort((np.arange(row.size), -row))
    cum = np.cumsum(probs[order])
    cut = int(np.searchsorted(cum, p, side="left"))
    cut = min(cut, order.size - 1)
    return {int(t) for t in order[:cut + 1]}


def top_k_set(logits_row, k: int) -> set[int]:
    row = np.asarray(as_array(logits_row), dtype=np.float64).reshape(-1)
    order = np.lexsort((np.arange(row.size), -row))
    return {int(t) for t in order[:k]}


# ---------------------------------------------------------------------------
# classification shortcut and perplexity
# ---------------------------------------------------------------------------

def argmax_output(logits_row, *, counters=None, bufs=None) -> tuple[int, float]:
    """Highest-logit label and its exact probability, computed from the
    single retrieve pass instead of a materialized softmax."""
    row = np.atleast_2d(as_array(logits_row))
    rr = retrieve(row, 1, counters=counters, bufs=bufs)
    label = int(rr.candidate_tokens[0].min())
    prob = float(np.exp(float(rr.group_maxima[0, 0]) - rr.logsumexp_full[0]))
    return label, prob


def naive_argmax_output(logits_row, *, counters=None) -> tuple[int, float]:
    row = np.asarray(as_array(logits_row), dtype=np.float64).reshape(-1)
    probs = np.exp(row - logsumexp(row))
    _ctr(counters).count_naive("softmax_full", 1, row.nbytes)
    label = int(np.argmax(row))
    return label, float(probs[label])


def perplexity(per_step_logits, target_tokens) -> float:
    """exp of the mean negative log-probability of the targets."""
    L = np.asarray(as_array(per_step_logits), dtype=np.float64)
    T = np.asarray(target_tokens, dtype=np.int64).reshape(-1)
    if L.ndim != 2 or L.shape[0] != T.shape[0]:
        raise DimensionError(f"{L.shape[0] if L.ndim == 2 else L.shape} logit rows "
                             f"for {T.shape[0]} targets")
    m = L.max(axis=1)
    lse = m + np.log(np.exp(L - m[:, None]).sum(axis=1))
    ll = L[np.arange(T.shape[0]), T] - lse
    return float(np.exp(-ll.mean()))
