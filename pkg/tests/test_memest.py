import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longseq import memest as M


@pytest.mark.parametrize("key", sorted(M.PUBLISHED_VALUES))
def test_published_anchor_within_one_percent(key):
    got, want = M.published_anchors()[key], M.PUBLISHED_VALUES[key]
    tol = 0.25 if key == "position_ids_125k_mib" else 0.01  # published as a rounded 0.2
    assert abs(got - want) / want <= tol, (key, got, want)


def test_fixed_8b_total_in_both_units():
    e = M.estimate_fixed(8e9)
    assert e.fixed_total_bytes == 144e9
    assert round(e.fixed_total_bytes / M.GiB, 1) == 134.1
    assert (e.weights_bytes, e.optimizer_bytes, e.master_weights_bytes, e.grads_bytes) == (16e9, 64e9, 32e9, 32e9)


def test_zero3_divides_fixed_share_and_offload_moves_optimizer_to_host():
    e = M.estimate_fixed(8e9, world_size=8)
    assert e.zero3_share_bytes == 18e9
    assert e.offload_host_share_bytes + e.offload_device_share_bytes == e.zero3_share_bytes


def _model(**kw):
    base = dict(param_count=1e6, hidden=64, layers=4, vocab=2048, work_per_token=4096.0,
                mlp_work_per_token=2048.0, mlp_tile_tokens=512, logits_tile_tokens=256)
    base.update(kw)
    return M.SolverModel(**base)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 200), st.integers(0, 20))
def test_bisect_max_matches_linear_scan(threshold, lo):
    lo = min(lo, threshold)
    hi = 256
    fits = lambda s: s <= threshold  # noqa: E731
    assert M.bisect_max(fits, lo, hi) == max(s for s in range(lo, hi + 1) if fits(s))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 64), st.sampled_from([1, 2, 4, 8]))
def test_bisect_max_respects_step(threshold, step):
    fits = lambda s: s <= threshold * step + step // 2  # noqa: E731
    assert M.bisect_max(fits, 0, 1000 * step, step) == threshold * step


def test_solver_is_monotone_in_budget():
    m = _model()
    prev = -1
    for mib in (16, 24, 32, 48, 64, 128):
        r = M.max_seqlen_solver(m, mib * M.MiB, None, M.Features(optimizer_offload=True))
        assert r.feasible and r.max_seqlen >= prev
        assert r.device_bytes <= mib * M.MiB
        assert m.usage(r.max_seqlen + 1, M.Features(optimizer_offload=True))[0] > mib * M.MiB
        prev = r.max_seqlen


def test_solver_features_only_grow_max_seqlen():
    m = _model(sp=8)
    rows = [M.Features(optimizer_offload=True),
            M.Features(optimizer_offload=True, tiled_loss=True),
            M.Features(optimizer_offload=True, tiled_loss=True, tiled_mlp=True),
            M.Features(optimizer_offload=True, tiled_loss=True, tiled_mlp=True, ckpt_offload=True)]
    got = [M.max_seqlen_solver(m, 64 * M.MiB, None, f).max_seqlen for f in rows]
    assert got == sorted(got) and all(s % 8 == 0 for s in got)


def test_solver_reports_infeasible_fixed_share():
    r = M.max_seqlen_solver(_model(param_count=1e9), 64 * M.MiB, None)
    assert not r.feasible and "fixed share" in r.reason


def test_host_budget_limits_offloaded_checkpoints():
    m = _model()
    f = M.Features(optimizer_offload=True, ckpt_offload=True)
    free = M.max_seqlen_solver(m, 1 << 40, None, f, s_max=1 << 24).max_seqlen
    capped = M.max_seqlen_solver(m, 1 << 40, 64 * M.MiB, f, s_max=1 << 24)
    assert capped.max_seqlen < free and capped.host_bytes <= 64 * M.MiB


@pytest.mark.parametrize("name", sorted(M.PRESETS))
def test_presets_report(name):
    e = M.report(**M.PRESETS[name], seqlen=125_000, sp=8, world_size=8)
    d = e.to_dict()
    assert all(v >= 0 for v in d.values() if isinstance(v, float))
    assert e.logits_bytes == M.estimate_logits(15_625, M.PRESETS[name]["vocab"])


@pytest.mark.parametrize("P", [1, 2])
def test_checkpoint_estimate_matches_ledger_exactly(P):
    from longseq import ledger as L
    from longseq.model import ModelConfig
    from longseq.train import DataConfig, FeatureConfig, ParallelConfig, RunConfig, TrainConfig, cmd_train

    cfg = RunConfig(model=ModelConfig(vocab_size=64, hidden_size=16, n_layers=3, q_heads=4, kv_heads=2,
                                      max_position=64),
                    parallel=ParallelConfig(P, P), features=FeatureConfig(ckpt=True, ulysses=P > 1),
                    train=TrainConfig(steps=1), data=DataConfig(seqlen=64))
    res = cmd_train(cfg)
    want = M.estimate_activation_ckpt(64, 16, 3, bytes_per_el=8, sp=P)[0]
    assert res.peak(L.DEVICE, "activation-checkpoint") == want


def test_logits_estimate_matches_ledger_exactly():
    from longseq.model import ModelConfig
    from longseq.train import DataConfig, FeatureConfig, RunConfig, TrainConfig, cmd_train

    cfg = RunConfig(model=ModelConfig(vocab_size=96, hidden_size=16, n_layers=1, q_heads=4, kv_heads=2,
                                      max_position=64),
                    features=FeatureConfig(), train=TrainConfig(steps=1), data=DataConfig(seqlen=40))
    largest = cmd_train(cfg).ranks[0].ledger_summary["largest_allocation"]["logits"]
    assert largest["bytes"] == M.estimate_logits(40, 96, bytes_per_el=8)
    assert largest["shape"] == [40, 96]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10 ** 6), st.integers(1, 8192), st.integers(1, 128), st.integers(2, 5))
def test_checkpoint_estimate_is_linear_in_each_argument(s, h, layers, k):
    base = M.estimate_activation_ckpt(s, h, layers)[0]
    assert M.estimate_activation_ckpt(k * s, h, layers)[0] == pytest.approx(k * base)
    assert M.estimate_activation_ckpt(s, k * h, layers)[0] == pytest.approx(k * base)
    assert M.estimate_activation_ckpt(s, h, k * layers)[0] == pytest.approx(k * base)


def test_zero3_world_size_never_decreases_solved_length():
    m = _model(param_count=4e6, zero3=True)
    got = [M.max_seqlen_solver(M.SolverModel(**{**m.__dict__, "world_size": w}), 64 * M.MiB, None,
                               M.Features(optimizer_offload=True)).max_seqlen for w in (1, 2, 4, 8)]
    assert got == sorted(got)
