"""Inference sessions.

A :class:`Session` owns one arena, one counter set, and one timer set.
The ``fused`` engine acquires every buffer from the static memory plan and
searches hierarchically; the ``naive`` engine mirrors eager-framework
execution (fresh arrays per op, concat-grown caches, exhaustive
softmax-and-sort search). Both produce identical output tokens on the
same inputs, which the benchmark asserts.

Sessions never share arenas; weights are immutable and may be shared
across sessions.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import decode as D
from . import model as M
from .errors import InputError
from .memory_plan import Arena, build_plan
from .tensor import OpCounters, Timers, gemm

I64 = np.int64


@dataclass(frozen=True)
class Hypothesis:
    tokens: list[int]
    score: float


class Session:
    def __init__(self, config: M.ModelConfig, weights: M.ModelWeights,
                 engine: str = "fused", share_plan: bool = True):
        if engine not in ("fused", "naive"):
            raise InputError(f"unknown engine {engine!r}")
        weights.validate(config)
        self.config = config
        self.weights = weights
        self.engine = engine
        self.counters = OpCounters()
        self.timers = Timers()
        self.positions = M.sinusoidal_positions(config.max_seq_len, config.d_model)
        self.plan = None
        self.arena = None
        self._buffers = None
        if engine == "fused":
            specs = M.plan_intermediates(config)
            if not share_plan:
                # one-buffer-per-intermediate baseline: force every lifetime
                # to overlap so nothing shares
                specs = [dataclasses.replace(s, first_use=0, last_use=1) for s in specs]
            self.plan = build_plan(specs)
            self.arena = Arena(self.plan)
            self._buffers = M.ArenaBuffers(self.arena)

    # ------------------------------------------------------------------
    def encode(self, tokens, lengths=None) -> np.ndarray:
        return M.encode(tokens, self.weights, self.config, lengths,
                        engine=self.engine, buffers=self._buffers,
                        positions=self.positions, counters=self.counters,
                        timers=self.timers)

    def _retrieve_bufs(self, rows: int) -> dict | None:
        if self.engine != "fused":
            return None
        V = self.config.vocab_size
        a = self.arena
        return {
            "group_max": a.acquire("retrieve.group_max", (rows, V)).data,
            "threshold": a.acquire("retrieve.threshold", (rows,)).data,
            "lse": a.acquire("retrieve.lse", (rows,), np.float64).data,
            "cand_idx": a.acquire("retrieve.cand_idx", (rows, V), np.int32).data,
        }

    # ------------------------------------------------------------------
    def generate(self, src_tokens, decode_config: D.DecodeConfig, src_lengths=None,
                 bos_token: int = 1, search: str | None = None) -> list[list[Hypothesis]]:
        """Encode, then auto-regressively decode every batch item.

        ``search`` overrides the engine's default output layer:
        ``hierarchical`` (retrieve and rerank) or ``exhaustive``.
        """
        cfg = decode_config
        cfg.validate(self.config.vocab_size, self.config.max_beam_size)
        src = np.asarray(src_tokens, dtype=I64)
        if src.ndim != 2:
            raise InputError(f"source tokens must be [batch, seq], got {src.shape}")
        if self.config.num_decoder_layers < 1:
            raise InputError("generation requires a decoder")
        batch, seq = src.shape
        K = cfg.effective_beam_size
        rows = batch * K
        fused = self.engine == "fused"
        if search is None:
            search = "hierarchical" if fused else "exhaustive"
        if search not in ("hierarchical", "exhaustive"):
            raise InputError(f"unknown search {search!r}")

        memory = self.encode(src, src_lengths)
        enc_mask = None
        if src_lengths is not None:
            if fused:
                enc_mask = self._buffers.get("enc.mask", (batch, seq))
            else:
                enc_mask = M.lengths_mask(src_lengths, seq)
        if fused:
            cross = M.build_cross_kv(memory, self.weights, self.config, batch, seq,
                                     buffers=self._buffers, counters=self.counters,
                                     timers=self.timers)
            cache = M.KVCache(self.config, rows, self._buffers)
        else:
            cross = M.naive_build_cross_kv(memory, self.weights, self.config, batch, seq,
                                           counters=self.counters, timers=self.timers)
            cache = M.NaiveKVCache(self.config.num_decoder_layers)
        rbufs = self._retrieve_bufs(rows)

        hier = search == "hierarchical"
        if cfg.method in ("beam", "greedy"):
            step_fn = D.beam_search_step if hier else D.exhaustive_beam_search_step
        elif cfg.method == "diverse_beam":
            step_fn = D.diverse_beam_search_step if hier else D.exhaustive_diverse_beam_search_step
        else:
            step_fn = None  # sampling

        rng = np.random.default_rng(cfg.seed)
        states = [D.BeamState() for _ in range(batch)]
        done = [False] * batch
        tokens = np.full(rows, bos_token, dtype=I64)
        parents = None
        max_steps = min(cfg.max_steps, self.config.max_seq_len)

        for t in range(max_steps):
            if fused:
                logits = M.decode_step(tokens, cache, cross, enc_mask, self.weights,
                                       self.config, batch, K, parents=parents,
                                       buffers=self._buffers, positions=self.positions,
                                       counters=self.counters, timers=self.timers)
            else:
                logits = M.naive_decode_step(tokens, cache, cross, enc_mask, self.weights,
                                             self.config, batch, K, parents=parents,
                                             positions=self.positions,
                                             counters=self.counters, timers=self.timers)
            parents = np.empty(rows, dtype=I64)
            tokens = np.zeros(rows, dtype=I64)
            last = t == max_steps - 1
            for b in range(batch):
                row0 = b * K
                parents[row0:row0 + K] = row0
                if done[b]:
                    continue
                st = states[b]
                rows_b = logits[row0:row0 + st.live]
                if step_fn is not None:
                    st = step_fn(st, rows_b, cfg, counters=self.counters, bufs=rbufs) \
                        if hier else step_fn(st, rows_b, cfg, counters=self.counters)
                else:
                    st = self._sampling_step(st, rows_b[0], cfg, rng, rbufs)
                states[b] = st
                if st.should_stop(cfg) or last or not st.prefixes:
                    done[b] = True
                    continue
                for i in range(st.live):
                    parents[row0 + i] = row0 + st.parents[i]
                    tokens[row0 + i] = st.last_tokens[i]
            if all(done):
                break
        return [[Hypothesis(tokens=seq_, score=sc) for seq_, sc in st.finalize(cfg)]
                for st in states]

    def _sampling_step(self, st: D.BeamState, logits_row, cfg: D.DecodeConfig,
                       rng, rbufs) -> D.BeamState:
        fused = self.engine == "fused"
        if cfg.method == "top_k":
            tok = (D.sample_top_k(logits_row, cfg.sample_k, rng,
                                  counters=self.counters, bufs=rbufs) if fused
                   else D.naive_sample_top_k(logits_row, cfg.sample_k, rng,
                                             counters=self.counters))
        else:
            tok = (D.sample_top_p(logits_row, cfg.sample_p, rng,
                                  counters=self.counters, bufs=rbufs) if fused
                   else D.naive_sample_top_p(logits_row, cfg.sample_p, rng,
                                             counters=self.counters))
        new = D.BeamState(prefixes=[st.prefixes[0] + [tok]],
                          cum_log_prob=[0.0], finished=list(st.finished),
                          step=st.step + 1, parents=[0], last_tokens=[tok],
                          chosen_tokens=[tok])
        if tok == cfg.eos_token:
            new.finished.append((new.prefixes[0], 0.0))
            new.prefixes = []
        return new

    # ------------------------------------------------------------------
    def classify(self, tokens, lengths=None) -> tuple[np.ndarray, np.ndarray]:
        """Encoder-only classification: first-position pooling, output
        projection, then the argmax shortcut (no softmax materialized)."""
        T = np.asarray(tokens, dtype=I64)
        batch, seq = T.shape
        memory = self.encode(T, lengths)
        fused = self.engine == "fused"
        if fused:
            pooled = self._buffers.get("cls.pooled", (batch, self.config.d_model))
            logits = self._buffers.get("dec.logits", (batch, self.config.vocab_size))
        else:
            pooled = np.empty((batch, self.config.d_model), np.float32)
            logits = np.empty((batch, self.config.vocab_size), np.float32)
        pooled[:] = memory[0::seq]
        gemm(pooled, self.weights.output_matrix(self.config), logits, transpose_b=True,
             counters=self.counters, timers=self.timers)
        labels = np.empty(batch, dtype=I64)
        probs = np.empty(batch, dtype=np.float64)
        rbufs = self._retrieve_bufs(batch)
        for b in range(batch):
            if fused:
                labels[b], probs[b] = D.argmax_output(logits[b], counters=self.counters,
                                                      bufs=rbufs)
            else:
                labels[b], probs[b] = D.naive_argmax_output(logits[b],
                                                            counters=self.counters)
        return labels, probs

    # ------------------------------------------------------------------
    def forced_logits(self, src_tokens, tgt_tokens, src_lengths=None) -> np.ndarray:
        """Teacher-forced per-position decoder logits, [batch, tgt_len,
        vocab]; the cross-validation and perplexity surface."""
        src = np.asarray(src_tokens, dtype=I64)
        tgt = np.asarray(tgt_tokens, dtype=I64)
        batch, seq = src.shape
        if tgt.ndim != 2 or tgt.shape[0] != batch:
            raise InputError(f"target tokens must be [batch, steps], got {tgt.shape}")
        memory = self.encode(src, src_lengths)
        enc_mask = None
        if src_lengths is not None:
            enc_mask = (self._buffers.get("enc.mask", (batch, seq))
                        if self.engine == "fused" else M.lengths_mask(src_lengths, seq))
        fused = self.engine == "fused"
        if fused:
            cross = M.build_cross_kv(memory, self.weights, self.config, batch, seq,
                                     buffers=self._buffers, counters=self.counters,
                                     timers=self.timers)
            cache = M.KVCache(self.config, batch, self._buffers)
        else:
            cross = M.naive_build_cross_kv(memory, self.weights, self.config, batch, seq,
                                           counters=self.counters, timers=self.timers)
            cache = M.NaiveKVCache(self.config.num_decoder_layers)
        out = np.empty((batch, tgt.shape[1], self.config.vocab_size), np.float32)
        for t in range(tgt.shape[1]):
            if fused:
                logits = M.decode_step(tgt[:, t], cache, cross, enc_mask, self.weights,
                                       self.config, batch, 1, buffers=self._buffers,
                                       positions=self.positions, counters=self.counters,
                                       timers=self.timers)
            else:
                logits = M.naive_decode_step(tgt[:, t], cache, cross, enc_mask,
                                             self.weights, self.config, batch, 1,
                                             positions=self.positions,
                                             counters=self.counters, timers=self.timers)
            out[:, t] = logits
        return out

    def plan_report(self) -> dict | None:
        return self.plan.report() if self.plan is not None else None
