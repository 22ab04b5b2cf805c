import numpy as np
import pytest

from latpir import he, planner, protocol, ring
from latpir.errors import InvalidArgument
from latpir.he import keygen
from latpir.planner import (
    Arena,
    ExecMode,
    HardwareModel,
    Phase,
    arithmetic_intensity,
    build_plan,
    choose_mode,
    coltor_stage,
    coltor_nodes,
    expand_nodes,
    expand_stage,
    expansion_leaves,
    external_product_batch,
    roofline_report,
    working_set,
)
from latpir.protocol import DbConfig

MB = 1024 * 1024


@pytest.fixture(scope="module")
def default_params():
    return he.default_params()


# ---------------------------------------------------------------------------
# working-set model


def test_coltor_spike_matches_worked_example(default_params):
    """256 nodes x ell=5 x 128 KB x batch 32 is the headline working-set spike."""
    config = DbConfig(d0=256, d1=512, record_bytes=16384)
    ws = working_set(Phase.COL_TOR, 0, 32, default_params, config)
    assert coltor_nodes(512, 0) == 256
    assert ws == 256 * 5 * 131072 * 32 == 5_368_709_120


def test_expand_single_node_footprint(default_params):
    config = DbConfig(d0=16, d1=16)
    ws = working_set(Phase.EXPAND_QUERY, 0, 1, default_params, config)
    assert ws == 5 * 64 * 1024  # ell polynomials of 64 KB, one node, batch 1


def test_working_set_linear_in_batch(default_params):
    config = DbConfig(d0=16, d1=16)
    for phase, stage in ((Phase.EXPAND_QUERY, 3), (Phase.COL_TOR, 1)):
        w1 = working_set(phase, stage, 8, default_params, config)
        w2 = working_set(phase, stage, 16, default_params, config)
        assert w2 == 2 * w1


def test_tree_geometry():
    assert expansion_leaves(16, 16, 5) == 16 + 4 * 5
    assert planner.num_expand_stages(36) == 6
    assert [expand_nodes(36, t) for t in range(6)] == [1, 2, 4, 8, 16, 32]
    assert [coltor_nodes(16, j) for j in range(4)] == [8, 4, 2, 1]


# ---------------------------------------------------------------------------
# mode choice and plans


def test_choose_mode_thresholds():
    hw = HardwareModel()
    assert choose_mode(50 * MB, hw) is ExecMode.OPERATION_LEVEL
    assert choose_mode(5 * 1024 * MB, hw) is ExecMode.STAGE_LEVEL
    assert choose_mode(96 * MB, hw) is ExecMode.STAGE_LEVEL  # tie goes fused


def test_plan_all_oplevel_small_batch(default_params):
    plan = build_plan(DbConfig(16, 16), default_params, 1, HardwareModel())
    for prof in plan.expand_stages + plan.coltor_stages:
        assert prof.mode is ExecMode.OPERATION_LEVEL
    assert plan.expand_transition is None and plan.coltor_transition is None


def test_plan_flags_coltor_spike(default_params):
    plan = build_plan(DbConfig(256, 512), default_params, 32, HardwareModel())
    assert plan.coltor_stages[0].mode is ExecMode.STAGE_LEVEL
    assert plan.coltor_stages[0].working_set == 5_368_709_120


def test_plan_monotone_modes(default_params):
    plan = build_plan(DbConfig(64, 64), default_params, 32, HardwareModel())
    ws_expand = [p.working_set for p in plan.expand_stages]
    assert ws_expand == sorted(ws_expand)
    ws_coltor = [p.working_set for p in plan.coltor_stages]
    assert ws_coltor == sorted(ws_coltor, reverse=True)
    seen_stage_level = False
    for prof in plan.expand_stages:
        if prof.mode is ExecMode.STAGE_LEVEL:
            seen_stage_level = True
        else:
            assert not seen_stage_level  # op-level never follows fused


def test_shrinking_l2_moves_transition_earlier(default_params):
    config = DbConfig(64, 64)
    prev = None
    for l2_mb in (512, 256, 128, 64, 32, 16):
        hw = HardwareModel(l2_bytes=l2_mb * MB)
        plan = build_plan(config, default_params, 32, hw)
        t = plan.expand_transition
        t = t if t is not None else len(plan.expand_stages)
        if prev is not None:
            assert t <= prev
        prev = t


def test_plan_export_rows(default_params):
    plan = build_plan(DbConfig(16, 16), default_params, 4, HardwareModel())
    text = plan.to_text()
    lines = text.strip().split("\n")
    assert lines[0].split("\t") == ["phase", "stage", "nodes", "working_set_bytes", "mode"]
    assert len(lines) == 1 + len(plan.expand_stages) + len(plan.coltor_stages)


def test_plan_deterministic(default_params):
    a = build_plan(DbConfig(64, 64), default_params, 32, HardwareModel())
    b = build_plan(DbConfig(64, 64), default_params, 32, HardwareModel())
    assert a.to_text() == b.to_text()


# ---------------------------------------------------------------------------
# arithmetic intensity and roofline


def test_rowsel_ai_matches_reported_value(default_params):
    # 2 GB encoded database at 16 KB records: d0*d1*64KB = 2 GB
    config = DbConfig(256, 128, 16384)
    assert config.d0 * config.d1 * default_params.poly_bytes == 2 * 1024 * MB
    ai = arithmetic_intensity(Phase.ROW_SEL, config, default_params, 32)
    assert 13.8 / 2 <= ai <= 13.8 * 2


def test_ai_strictly_increasing_in_batch(default_params):
    config = DbConfig(256, 128, 16384)
    prev = 0.0
    for batch in (1, 2, 4, 8, 16, 32, 64):
        ai = arithmetic_intensity(Phase.ROW_SEL, config, default_params, batch)
        assert ai > prev
        prev = ai


def test_batch1_below_ridge(default_params):
    hw = HardwareModel()
    config = DbConfig(256, 128, 16384)
    ai = arithmetic_intensity(Phase.ROW_SEL, config, default_params, 1)
    assert ai < hw.ridge_point


def test_roofline_report_shape(default_params):
    hw = HardwareModel()
    rep = roofline_report(hw, DbConfig(256, 128, 16384), default_params, 32)
    phases = [r.phase for r in rep.rows]
    assert phases == ["ExpandQuery", "RowSel", "ColTor"]
    for r in rep.rows:
        assert r.bound in ("memory", "compute")
        assert abs(r.ai - r.ops / r.bytes) < 1e-12
    text = rep.to_text()
    assert "ridge_point" in text


def test_hardware_model_validation():
    with pytest.raises(InvalidArgument):
        HardwareModel(l2_bytes=0)


# ---------------------------------------------------------------------------
# stage executors: equivalence and allocation dominance


@pytest.fixture(scope="module")
def exec_ctx():
    params = he.test_params(n=128, k=2, prime_bits=26, plain_bits=8, z_bits=9, error_bound=2)
    rng = np.random.default_rng(3)
    sk, evks = keygen(params, rng, num_stages=4)
    return params, sk, evks, rng


def _random_state(params, rng, bsz, nodes):
    basis = params.basis
    return np.stack([
        np.stack([
            np.stack([ring.sample_uniform(basis, basis.n, rng, ring.Domain.NTT).limbs
                      for _ in range(2)])
            for _ in range(nodes)
        ])
        for _ in range(bsz)
    ])


def test_expand_stage_modes_bit_identical(exec_ctx):
    params, sk, evks, rng = exec_ctx
    basis = params.basis
    state = _random_state(params, rng, 2, 4)
    ksks = np.stack([np.stack([ct.raw() for ct in evks[2].ksk])] * 2)
    mono = ring.monomial_ntt(basis, -4)
    out_op = expand_stage(state, ksks, evks[2].k_aut, mono, basis, params.gadget,
                          ExecMode.OPERATION_LEVEL)
    out_fused = expand_stage(state, ksks, evks[2].k_aut, mono, basis, params.gadget,
                             ExecMode.STAGE_LEVEL)
    assert np.array_equal(out_op, out_fused)


def test_coltor_stage_modes_bit_identical(exec_ctx):
    params, sk, evks, rng = exec_ctx
    basis = params.basis
    state = _random_state(params, rng, 2, 4)
    rgsw = np.stack([he.gen_rgsw(sk, 1, rng).raw() for _ in range(2)])
    out_op = coltor_stage(state, rgsw, basis, params.gadget, ExecMode.OPERATION_LEVEL)
    out_fused = coltor_stage(state, rgsw, basis, params.gadget, ExecMode.STAGE_LEVEL)
    assert np.array_equal(out_op, out_fused)


def test_single_node_identical_both_paths(exec_ctx):
    params, sk, evks, rng = exec_ctx
    basis = params.basis
    state = _random_state(params, rng, 1, 1)
    ksks = np.stack([np.stack([ct.raw() for ct in evks[0].ksk])])
    mono = ring.monomial_ntt(basis, -1)
    a = expand_stage(state, ksks, evks[0].k_aut, mono, basis, params.gadget,
                     ExecMode.OPERATION_LEVEL)
    b = expand_stage(state, ksks, evks[0].k_aut, mono, basis, params.gadget,
                     ExecMode.STAGE_LEVEL)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("nodes", [1, 2, 4, 8])
def test_fused_peak_strictly_below_oplevel(exec_ctx, nodes):
    params, sk, evks, rng = exec_ctx
    basis = params.basis
    state = _random_state(params, rng, 2, nodes)
    ksks = np.stack([np.stack([ct.raw() for ct in evks[0].ksk])] * 2)
    mono = ring.monomial_ntt(basis, -1)
    arena_op, arena_fused = Arena(), Arena()
    expand_stage(state, ksks, evks[0].k_aut, mono, basis, params.gadget,
                 ExecMode.OPERATION_LEVEL, arena_op)
    expand_stage(state, ksks, evks[0].k_aut, mono, basis, params.gadget,
                 ExecMode.STAGE_LEVEL, arena_fused)
    assert arena_fused.peak_bytes < arena_op.peak_bytes
    # accounting is released at scope exit
    assert arena_op.current_bytes == 0 and arena_fused.current_bytes == 0


@pytest.mark.parametrize("pairs", [1, 2, 4])
def test_coltor_fused_peak_below_oplevel(exec_ctx, pairs):
    params, sk, evks, rng = exec_ctx
    basis = params.basis
    state = _random_state(params, rng, 2, 2 * pairs)
    rgsw = np.stack([he.gen_rgsw(sk, 0, rng).raw() for _ in range(2)])
    arena_op, arena_fused = Arena(), Arena()
    coltor_stage(state, rgsw, basis, params.gadget, ExecMode.OPERATION_LEVEL, arena_op)
    coltor_stage(state, rgsw, basis, params.gadget, ExecMode.STAGE_LEVEL, arena_fused)
    assert arena_fused.peak_bytes < arena_op.peak_bytes


def test_external_product_batch_matches_single(exec_ctx):
    params, sk, evks, rng = exec_ctx
    basis = params.basis
    m = rng.integers(0, params.plain_modulus, size=params.n, dtype=np.uint64)
    ct = he.encrypt(sk, m, rng)
    rgsw = he.gen_rgsw(sk, 1, rng)
    single = he.external_product(ct, rgsw)
    batched = external_product_batch(
        ct.raw()[None, None], rgsw.raw()[None], basis, params.gadget, ExecMode.OPERATION_LEVEL
    )
    assert np.array_equal(batched[0, 0], single.raw())
    fused = external_product_batch(
        ct.raw()[None, None], rgsw.raw()[None], basis, params.gadget, ExecMode.STAGE_LEVEL
    )
    assert np.array_equal(fused[0, 0], single.raw())


def test_coltor_stage_rejects_odd_count(exec_ctx):
    params, sk, evks, rng = exec_ctx
    state = _random_state(params, rng, 1, 3)
    rgsw = np.stack([he.gen_rgsw(sk, 0, rng).raw()])
    with pytest.raises(InvalidArgument):
        coltor_stage(state, rgsw, params.basis, params.gadget, ExecMode.OPERATION_LEVEL)


def test_execute_stage_wrappers(exec_ctx):
    params, sk, evks, rng = exec_ctx
    basis = params.basis
    state = _random_state(params, rng, 1, 2)
    ksks = np.stack([np.stack([ct.raw() for ct in evks[1].ksk])])
    mono = ring.monomial_ntt(basis, -2)
    a = planner.execute_stage_oplevel(Phase.EXPAND_QUERY, state, ksks, evks[1].k_aut,
                                      mono, basis, params.gadget)
    b = planner.execute_stage_fused(Phase.EXPAND_QUERY, state, ksks, evks[1].k_aut,
                                    mono, basis, params.gadget)
    assert np.array_equal(a, b)
