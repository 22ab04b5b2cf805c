"""Working-set model, hybrid execution planning, and the two stage executors.

The tree phases (query expansion and the column tournament) can run each stage
two ways:

* operation-level: every primitive (automorphism, inverse NTT, digit
  extraction, forward NTT, multiply-accumulate) runs batched across all nodes
  of the stage, materializing its full output in a shared buffer arena before
  the next primitive starts.  Maximum batching, but the arena holds
  nodes x ell digit polynomials at once.
* stage-level (fused): each tree node is processed end to end, streaming one
  digit at a time through task-local buffers that are reused across nodes.

Both paths compute identical ring arithmetic, so outputs are bit-identical;
only the transient allocation profile differs.  The planner picks a mode per
stage by comparing the stage's transient working set against the hardware
model's last-level cache capacity: at or above capacity it switches to the
fused path.

Working-set accounting counts the digit-decomposition transients only (the
dominant spike): nodes x ell x footprint x batch bytes, where the footprint is
one polynomial for expansion stages (only `a` is decomposed) and two for
tournament stages (both components are).
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np

from .errors import InvalidArgument
from .he import DigitExtractor, GadgetConfig, HeParams
from .ring import RnsBasis, U64, intt_raw, mod_add, mod_mul, mod_sub, ntt_automorphism_perm, ntt_raw

if TYPE_CHECKING:  # avoid a runtime cycle; protocol imports this module
    from .protocol import DbConfig


# ---------------------------------------------------------------------------
# instrumented buffer arena


class Arena:
    """Tracks materialized intermediate buffers: current, peak, and cumulative bytes.

    Models off-chip traffic pressure: operation-level stages allocate one
    buffer per primitive output, fused stages reuse a constant set.  Not
    thread-safe; each executor owns its arena.
    """

    def __init__(self):
        self.current_bytes = 0
        self.peak_bytes = 0
        self.total_bytes = 0
        self._scopes: list[int] = []

    def alloc(self, shape: tuple[int, ...], dtype=U64) -> np.ndarray:
        nbytes = int(np.prod(shape)) * np.dtype(dtype).itemsize
        self.current_bytes += nbytes
        self.peak_bytes = max(self.peak_bytes, self.current_bytes)
        self.total_bytes += nbytes
        if self._scopes:
            self._scopes[-1] += nbytes
        return np.empty(shape, dtype=dtype)

    @contextmanager
    def scope(self):
        """Allocations made inside the scope are released (for accounting) at exit."""
        self._scopes.append(0)
        try:
            yield self
        finally:
            self.current_bytes -= self._scopes.pop()


# ---------------------------------------------------------------------------
# hardware model and plan types


@dataclass(frozen=True)
class HardwareModel:
    """Capacity/bandwidth/throughput parameters of the execution platform."""

    l2_bytes: int = 96 * 1024 * 1024
    dram_bandwidth: float = 1.66e12  # bytes/s
    peak_ops: float = 31.5e12  # 32-bit multiply-adds/s
    processors: int = 170
    scratch_bytes: int = 96 * 1024

    def __post_init__(self):
        for name in ("l2_bytes", "dram_bandwidth", "peak_ops", "processors", "scratch_bytes"):
            if getattr(self, name) <= 0:
                raise InvalidArgument(f"{name} must be positive")

    @property
    def ridge_point(self) -> float:
        """Arithmetic intensity where the memory roof meets the compute roof."""
        return self.peak_ops / self.dram_bandwidth


class ExecMode(Enum):
    OPERATION_LEVEL = "op"
    STAGE_LEVEL = "stage"


class Phase(Enum):
    EXPAND_QUERY = "ExpandQuery"
    ROW_SEL = "RowSel"
    COL_TOR = "ColTor"


@dataclass(frozen=True)
class StageProfile:
    phase: Phase
    stage: int
    nodes: int
    footprint_bytes: int  # per-node polynomial set, before the x ell expansion
    batch: int
    working_set: int
    mode: ExecMode


@dataclass
class ExecutionPlan:
    expand_stages: list[StageProfile]
    coltor_stages: list[StageProfile]
    expand_transition: int | None  # first stage run fused
    coltor_transition: int | None  # first stage run operation-level

    def mode_for(self, phase: Phase, stage: int) -> ExecMode:
        stages = self.expand_stages if phase is Phase.EXPAND_QUERY else self.coltor_stages
        return stages[stage].mode

    def rows(self):
        for prof in self.expand_stages + self.coltor_stages:
            yield (prof.phase.value, prof.stage, prof.nodes, prof.working_set, prof.mode.value)

    def to_text(self) -> str:
        lines = ["phase\tstage\tnodes\tworking_set_bytes\tmode"]
        for row in self.rows():
            lines.append("\t".join(str(v) for v in row))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# tree geometry


def expansion_leaves(d0: int, d1: int, ell: int) -> int:
    """Ciphertexts produced by expansion: d0 row slots + log2(d1)*ell column slots."""
    return d0 + (d1.bit_length() - 1) * ell


def num_expand_stages(total_leaves: int) -> int:
    return max(math.ceil(math.log2(total_leaves)), 0) if total_leaves > 1 else 0


def expand_nodes(total_leaves: int, stage: int) -> int:
    """Subs nodes processed at the given expansion stage."""
    return min(1 << stage, total_leaves)


def num_coltor_stages(d1: int) -> int:
    return d1.bit_length() - 1


def coltor_nodes(d1: int, stage: int) -> int:
    """External-product nodes at the given tournament stage."""
    return d1 >> (stage + 1)


# ---------------------------------------------------------------------------
# analytical model


def working_set(phase: Phase, stage: int, batch: int, params: HeParams, config: "DbConfig") -> int:
    """Transient digit-decomposition bytes of one stage across the whole batch."""
    ell = params.gadget.ell
    if phase is Phase.EXPAND_QUERY:
        nodes = expand_nodes(expansion_leaves(config.d0, config.d1, ell), stage)
        footprint = params.poly_bytes
    elif phase is Phase.COL_TOR:
        nodes = coltor_nodes(config.d1, stage)
        footprint = 2 * params.poly_bytes
    else:
        raise InvalidArgument(f"no working-set model for phase {phase}")
    return nodes * ell * footprint * batch


def choose_mode(working_set_bytes: int, hw: HardwareModel) -> ExecMode:
    """Operation-level below L2 capacity; fused at or above (ties go fused)."""
    return ExecMode.STAGE_LEVEL if working_set_bytes >= hw.l2_bytes else ExecMode.OPERATION_LEVEL


def build_plan(config: "DbConfig", params: HeParams, batch: int, hw: HardwareModel) -> ExecutionPlan:
    """Static per-stage mode choice for both tree phases; no runtime profiling."""
    ell = params.gadget.ell
    expand, coltor = [], []
    expand_transition = coltor_transition = None
    total = expansion_leaves(config.d0, config.d1, ell)
    for t in range(num_expand_stages(total)):
        ws = working_set(Phase.EXPAND_QUERY, t, batch, params, config)
        mode = choose_mode(ws, hw)
        if mode is ExecMode.STAGE_LEVEL and expand_transition is None:
            expand_transition = t
        expand.append(
            StageProfile(Phase.EXPAND_QUERY, t, expand_nodes(total, t), params.poly_bytes, batch, ws, mode)
        )
    saw_fused = False
    for t in range(num_coltor_stages(config.d1)):
        ws = working_set(Phase.COL_TOR, t, batch, params, config)
        mode = choose_mode(ws, hw)
        if mode is ExecMode.STAGE_LEVEL:
            saw_fused = True
        elif saw_fused and coltor_transition is None:
            coltor_transition = t
        coltor.append(
            StageProfile(Phase.COL_TOR, t, coltor_nodes(config.d1, t), 2 * params.poly_bytes, batch, ws, mode)
        )
    return ExecutionPlan(expand, coltor, expand_transition, coltor_transition)


def rowsel_ops(config: "DbConfig", params: HeParams, batch: int) -> int:
    """Multiply-adds in the batched row-selection GEMMs (one MAC = one op)."""
    p_extent = params.basis.k * params.n
    return p_extent * (2 * batch) * config.d0 * config.d1


def rowsel_bytes(config: "DbConfig", params: HeParams, batch: int) -> int:
    """Encoded database + input ciphertexts + output ciphertexts."""
    db = config.d0 * config.d1 * params.poly_bytes
    cts_in = batch * config.d0 * params.ct_bytes
    cts_out = batch * config.d1 * params.ct_bytes
    return db + cts_in + cts_out


def arithmetic_intensity(phase: Phase, config: "DbConfig", params: HeParams, batch: int) -> float:
    ops, nbytes = _phase_model(phase, config, params, batch)
    return ops / nbytes


def _phase_model(phase: Phase, config: "DbConfig", params: HeParams, batch: int) -> tuple[int, int]:
    ell = params.gadget.ell
    k, n = params.basis.k, params.n
    poly = params.poly_bytes
    log_n = n.bit_length() - 1
    if phase is Phase.ROW_SEL:
        return rowsel_ops(config, params, batch), rowsel_bytes(config, params, batch)
    if phase is Phase.EXPAND_QUERY:
        total = expansion_leaves(config.d0, config.d1, ell)
        node_ops = (1 + ell) * (k * n // 2) * log_n + 2 * ell * k * n
        ops = nbytes = 0
        for t in range(num_expand_stages(total)):
            nodes = expand_nodes(total, t)
            ops += batch * nodes * node_ops
            nbytes += batch * (nodes * 6 * poly + 2 * ell * poly)
        return ops, nbytes
    if phase is Phase.COL_TOR:
        node_ops = (2 + 2 * ell) * (k * n // 2) * log_n + 4 * ell * k * n
        ops = nbytes = 0
        for t in range(num_coltor_stages(config.d1)):
            nodes = coltor_nodes(config.d1, t)
            ops += batch * nodes * node_ops
            nbytes += batch * (nodes * 6 * poly + 4 * ell * poly)
        return ops, nbytes
    raise InvalidArgument(f"unknown phase {phase}")


@dataclass(frozen=True)
class RooflineRow:
    phase: str
    ops: int
    bytes: int
    ai: float
    bound: str


@dataclass
class RooflineReport:
    hw: HardwareModel
    rows: list[RooflineRow]

    def to_text(self) -> str:
        lines = [f"ridge_point\t{self.hw.ridge_point:.3f}", "phase\tops\tbytes\tai\tbound"]
        for r in self.rows:
            lines.append(f"{r.phase}\t{r.ops}\t{r.bytes}\t{r.ai:.4f}\t{r.bound}")
        return "\n".join(lines) + "\n"


def roofline_report(hw: HardwareModel, config: "DbConfig", params: HeParams, batch: int) -> RooflineReport:
    rows = []
    for phase in (Phase.EXPAND_QUERY, Phase.ROW_SEL, Phase.COL_TOR):
        ops, nbytes = _phase_model(phase, config, params, batch)
        ai = ops / nbytes
        rows.append(
            RooflineRow(phase.value, ops, nbytes, ai, "compute" if ai >= hw.ridge_point else "memory")
        )
    return RooflineReport(hw, rows)


# ---------------------------------------------------------------------------
# stage executors
#
# Ciphertext stacks have shape (B, C, 2, k, n): B queries, C tree nodes, the
# two ciphertext components, then limbs.  Key stacks: (B, ell, 2, k, n) for
# evaluation keys, (B, 2*ell, 2, k, n) for RGSW rows.


def _mac_rows(digit: np.ndarray, rows: np.ndarray, acc: np.ndarray, q_col: np.ndarray) -> None:
    """acc[..., c] += digit * rows[c] for both components, in place."""
    for comp in range(2):
        acc[..., comp, :, :] = mod_add(
            acc[..., comp, :, :], mod_mul(digit, rows[..., comp, :, :], q_col), q_col
        )


def expand_stage(
    state: np.ndarray,
    ksks: np.ndarray,
    k_aut: int,
    mono_neg: np.ndarray,
    basis: RnsBasis,
    gadget: GadgetConfig,
    mode: ExecMode,
    arena: Arena | None = None,
) -> np.ndarray:
    """One expansion stage: every input node yields (c + Subs(c), X^-g * (c - Subs(c))).

    ``mono_neg`` holds the NTT values of X^(-2^t) for the stage.  Output has
    twice the node count; callers truncate to the leaves they need.
    """
    arena = arena if arena is not None else Arena()
    bsz, nodes = state.shape[0], state.shape[1]
    k, n = basis.k, basis.n
    ell = gadget.ell
    q = basis.q_col
    q64 = basis.q_arr.astype(np.int64)[:, None]
    perm = ntt_automorphism_perm(n, k_aut)
    out = np.empty((bsz, 2 * nodes, 2, k, n), dtype=U64)

    if mode is ExecMode.OPERATION_LEVEL:
        with arena.scope():
            aut = arena.alloc((bsz, nodes, 2, k, n))
            aut[:] = state[..., perm]
            a_coeff = arena.alloc((bsz, nodes, k, n))
            a_coeff[:] = intt_raw(aut[:, :, 0], basis)
            digits = arena.alloc((bsz, nodes, ell, k, n))
            ex = DigitExtractor(a_coeff, basis, gadget)
            for i in range(ell):
                digits[:, :, i] = ex.next_limbs(q64)
            digits[:] = ntt_raw(digits, basis)
            acc = arena.alloc((bsz, nodes, 2, k, n))
            acc[:] = 0
            for i in range(ell):
                _mac_rows(digits[:, :, i], ksks[:, None, i], acc, q)
            subs_out = acc
            subs_out[:, :, 1] = mod_add(subs_out[:, :, 1], aut[:, :, 1], q)
            out[:, :nodes] = mod_add(state, subs_out, q)
            out[:, nodes:] = mod_mul(mono_neg, mod_sub(state, subs_out, q), q)
    else:
        with arena.scope():
            aut = arena.alloc((bsz, 2, k, n))
            a_coeff = arena.alloc((bsz, k, n))
            digit = arena.alloc((bsz, k, n))
            acc = arena.alloc((bsz, 2, k, n))
            for c in range(nodes):
                aut[:] = state[:, c][..., perm]
                a_coeff[:] = intt_raw(aut[:, 0], basis)
                ex = DigitExtractor(a_coeff, basis, gadget)
                acc[:] = 0
                for i in range(ell):
                    digit[:] = ntt_raw(ex.next_limbs(q64), basis)
                    _mac_rows(digit, ksks[:, i], acc, q)
                acc[:, 1] = mod_add(acc[:, 1], aut[:, 1], q)
                out[:, c] = mod_add(state[:, c], acc, q)
                out[:, nodes + c] = mod_mul(mono_neg, mod_sub(state[:, c], acc, q), q)
    return out


def external_product_batch(
    cts: np.ndarray,
    rgsw_rows: np.ndarray,
    basis: RnsBasis,
    gadget: GadgetConfig,
    mode: ExecMode,
    arena: Arena | None = None,
) -> np.ndarray:
    """Batched external products: (B, M, 2, k, n) boxdot (B, 2*ell, 2, k, n).

    Each query's M ciphertexts hit that query's RGSW; both components are
    digit-decomposed, the a digits multiply rows [0, ell), the b digits rows
    [ell, 2*ell).
    """
    arena = arena if arena is not None else Arena()
    bsz, m_cts = cts.shape[0], cts.shape[1]
    k, n = basis.k, basis.n
    ell = gadget.ell
    q = basis.q_col
    q64 = basis.q_arr.astype(np.int64)[:, None]
    out = np.empty((bsz, m_cts, 2, k, n), dtype=U64)

    if mode is ExecMode.OPERATION_LEVEL:
        with arena.scope():
            coeff = arena.alloc((bsz, m_cts, 2, k, n))
            coeff[:] = intt_raw(cts, basis)
            digits = arena.alloc((bsz, m_cts, 2, ell, k, n))
            ex = DigitExtractor(coeff, basis, gadget)
            for i in range(ell):
                digits[:, :, :, i] = ex.next_limbs(q64)
            digits[:] = ntt_raw(digits, basis)
            acc = arena.alloc((bsz, m_cts, 2, k, n))
            acc[:] = 0
            for comp in range(2):
                for i in range(ell):
                    _mac_rows(digits[:, :, comp, i], rgsw_rows[:, None, comp * ell + i], acc, q)
            out[:] = acc
    else:
        with arena.scope():
            coeff = arena.alloc((bsz, 2, k, n))
            digit = arena.alloc((bsz, k, n))
            acc = arena.alloc((bsz, 2, k, n))
            for c in range(m_cts):
                coeff[:] = intt_raw(cts[:, c], basis)
                acc[:] = 0
                for comp in range(2):
                    ex = DigitExtractor(coeff[:, comp], basis, gadget)
                    for i in range(ell):
                        digit[:] = ntt_raw(ex.next_limbs(q64), basis)
                        _mac_rows(digit, rgsw_rows[:, comp * ell + i], acc, q)
                out[:, c] = acc
    return out


def coltor_stage(
    state: np.ndarray,
    rgsw_rows: np.ndarray,
    basis: RnsBasis,
    gadget: GadgetConfig,
    mode: ExecMode,
    arena: Arena | None = None,
) -> np.ndarray:
    """One tournament stage: pairs (even, odd) -> even + (odd - even) boxdot rgsw.

    ``rgsw_rows`` has shape (B, 2*ell, 2, k, n); the stage's selection bit is
    per query.  Output halves the node count.
    """
    arena = arena if arena is not None else Arena()
    bsz, nodes = state.shape[0], state.shape[1]
    if nodes % 2:
        raise InvalidArgument("tournament stage needs an even number of ciphertexts")
    pairs = nodes // 2
    q = basis.q_col
    even = state[:, 0::2]
    odd = state[:, 1::2]
    with arena.scope():
        diff = arena.alloc((bsz, pairs, 2, basis.k, basis.n))
        diff[:] = mod_sub(odd, even, q)
        prod = external_product_batch(diff, rgsw_rows, basis, gadget, mode, arena)
        return mod_add(even, prod, q)


def execute_stage_oplevel(phase: Phase, *args, **kwargs) -> np.ndarray:
    """Operation-level stage execution (batched primitives, materialized intermediates)."""
    fn = expand_stage if phase is Phase.EXPAND_QUERY else coltor_stage
    return fn(*args, mode=ExecMode.OPERATION_LEVEL, **kwargs)


def execute_stage_fused(phase: Phase, *args, **kwargs) -> np.ndarray:
    """Stage-level (fused) execution: per-node streaming with task-local buffers."""
    fn = expand_stage if phase is Phase.EXPAND_QUERY else coltor_stage
    return fn(*args, mode=ExecMode.STAGE_LEVEL, **kwargs)
