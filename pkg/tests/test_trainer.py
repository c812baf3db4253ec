import numpy as np
import pytest
import torch

from anchorfuse.graph import EncoderConfig
from anchorfuse.interaction import InteractionConfig
from anchorfuse.trainer import (
    FUSE_TERMS, LOSS_TERMS, PrototypeBank, TrainConfig, bank_view, conn_loss, embed, init_state, kd_loss, rec_loss,
    run_schedule, train_step, update_prototypes, write_training_log,
)

ENC = EncoderConfig(k_top=3, hidden=16, d=8, attn_dim=4, scales=(1, 2))
INTER = InteractionConfig(proj_dim=4)


def toy_data(n=40, g_var=6, g_inv=10, seed=0):
    rng = np.random.default_rng(seed)
    types = rng.integers(2, size=n)
    X_inv = rng.gamma(2.0, size=(n, g_inv)) + 3.0 * types[:, None]
    X_var = rng.gamma(2.0, size=(n, g_var))
    return X_var, X_inv


def batch_of(X_var, X_inv, dtype=torch.float32):
    xv = torch.as_tensor(X_var, dtype=dtype)
    xi = torch.as_tensor(X_inv, dtype=dtype)
    return {"X_var": xv, "X_inv": xi, "X_var_in": xv, "X_inv_in": xi}


def bank_with(centers, temperature=0.1, spread=1.0):
    bank = PrototypeBank(len(centers), temperature=temperature)
    bank.centers = torch.as_tensor(centers, dtype=torch.float64)
    bank.spread = spread
    return bank


def on_bank(V):
    """Rows already standardised so that bank_view is the identity on them."""
    V = torch.as_tensor(V, dtype=torch.float64)
    return bank_view(V)


def test_rec_loss_per_entry():
    a = torch.zeros(2, 3)
    b = torch.ones(2, 3)
    assert float(rec_loss(a, b)) == 1.0
    assert float(rec_loss(torch.zeros(0, 3), torch.zeros(0, 3))) == 0.0


def test_conn_loss_matches_when_confident():
    C = on_bank([[1.0, -1.0, 0.0, 0.0], [0.0, 0.0, 1.0, -1.0]])
    bank = bank_with(C, temperature=0.01)
    H = C.repeat(3, 1)
    labels = torch.tensor([0, 1] * 3)
    assert float(conn_loss(H, bank, labels, torch.ones(6), 0.75)) <= 0.01


def test_conn_loss_empty_confident_set():
    bank = bank_with(on_bank(torch.randn(3, 4)))
    loss = conn_loss(torch.randn(5, 4, dtype=torch.float64), bank, torch.zeros(5, dtype=torch.long),
                     torch.full((5,), 0.5), 0.75)
    assert float(loss) == 0.0


def test_conn_loss_single_prototype():
    bank = bank_with(on_bank(torch.randn(1, 4)))
    loss = conn_loss(torch.randn(5, 4, dtype=torch.float64), bank, torch.zeros(5, dtype=torch.long),
                     torch.ones(5), 0.75)
    assert float(loss) == pytest.approx(0.0, abs=1e-12)


def test_kd_equals_teacher_entropy_when_matched():
    torch.manual_seed(0)
    bank = bank_with(on_bank(torch.randn(3, 6)))
    H = torch.randn(4, 6, dtype=torch.float64)
    q = bank.soft_assign(H)
    entropy = -(q * q.log()).sum(dim=1)
    w = q.max(dim=1).values
    expected = (w * entropy).sum() / w.sum()
    assert float(kd_loss(H, bank, q, 0.0, 1.0)) == pytest.approx(float(expected), rel=1e-10)


def test_kd_threshold_and_power():
    torch.manual_seed(1)
    bank = bank_with(on_bank(torch.randn(3, 6)))
    H = torch.randn(4, 6, dtype=torch.float64)
    q = bank.soft_assign(H)
    assert float(kd_loss(H, bank, q, 1.01, 1.0)) == 0.0
    # power 0 gives an unweighted mean over the confident cells
    ce = -(q * torch.log_softmax(bank.logits(H), dim=1)).sum(dim=1)
    assert float(kd_loss(H, bank, q, 0.0, 0.0)) == pytest.approx(float(ce.mean()), rel=1e-10)


def test_kd_teacher_gets_no_gradient():
    bank = bank_with(on_bank(torch.randn(3, 6)))
    H_t = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
    H_s = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
    kd_loss(H_s, bank, bank.soft_assign(H_t), 0.0, 1.0).backward()
    assert H_t.grad is None and H_s.grad is not None


def test_momentum_one_freezes_prototypes():
    bank = bank_with(on_bank(torch.randn(3, 6)))
    bank.momentum = 1.0
    before = bank.centers.clone()
    update_prototypes(bank, torch.randn(20, 6, dtype=torch.float64))
    assert torch.equal(bank.centers, before)


def test_momentum_zero_jumps_to_means():
    bank = bank_with(on_bank(torch.randn(2, 6)))
    bank.momentum = 0.0
    H = torch.randn(30, 6, dtype=torch.float64)
    V = bank_view(H)
    hard = ((V[:, None, :] - bank.centers[None]) ** 2).sum(-1).argmin(1)
    update_prototypes(bank, H)
    for k in range(2):
        if (hard == k).any():
            torch.testing.assert_close(bank.centers[k], V[hard == k].mean(0))


def test_prototypes_converge_on_blobs():
    gen = torch.Generator().manual_seed(0)
    means = 4.0 * torch.randn(3, 8, generator=gen, dtype=torch.float64)
    labels = torch.arange(60) % 3
    bank = PrototypeBank(3, momentum=0.8, seed=0)

    def draw():
        return means[labels] + 0.05 * torch.randn(60, 8, generator=gen, dtype=torch.float64)

    for _ in range(50):
        update_prototypes(bank, draw())
    target = bank_view(means)
    dist = ((target[:, None, :] - bank.centers[None]) ** 2).sum(-1).sqrt()
    assert float(dist.min(dim=1).values.max()) < 0.05


def test_bank_initialises_with_kmeans():
    bank = PrototypeBank(24)
    update_prototypes(bank, torch.randn(10, 6, dtype=torch.float64))
    assert bank.centers.shape == (10, 6)  # k clamps to the number of rows


def test_phase_schedule_zeros():
    X_var, X_inv = toy_data()
    cfg = TrainConfig(total_steps=6, warm_steps=4, align_only_steps=2)
    state = init_state(6, 10, ENC, INTER, cfg)
    b = batch_of(X_var, X_inv)
    for step in range(6):
        rec = train_step(state, b, step)
        assert rec["i_fuse"] == int(step >= 4)
        if step < 4:
            assert all(rec[k] == 0.0 for k in FUSE_TERMS)
        else:
            assert rec["rec_fused"] > 0
        if step < 2:
            assert rec["conn_var"] == rec["conn_inv"] == 0.0 and rec["conf_frac"] == 0.0
    assert state.bank.initialized


def test_warmup_masks_fusion_gradients():
    X_var, X_inv = toy_data()
    cfg = TrainConfig(total_steps=3, warm_steps=3, align_only_steps=0)
    state = init_state(6, 10, ENC, INTER, cfg)
    before = {n: p.detach().clone() for n, p in state.model.fuser.named_parameters()}
    dec = [p.detach().clone() for p in state.model.fused_decoder.parameters()]
    for step in range(3):
        train_step(state, batch_of(X_var, X_inv), step)
    for n, p in state.model.fuser.named_parameters():
        assert torch.equal(p, before[n]), n
    for p, q in zip(state.model.fused_decoder.parameters(), dec):
        assert torch.equal(p, q)


def test_no_refine_before_interaction():
    X_var, X_inv = toy_data()
    cfg = TrainConfig(total_steps=2, warm_steps=2, align_only_steps=2)
    state = init_state(6, 10, ENC, INTER, cfg)
    before = [p.detach().clone() for p in state.model.refiner.parameters()]
    for step in range(2):
        train_step(state, batch_of(X_var, X_inv), step)
    for p, q in zip(state.model.refiner.parameters(), before):
        assert torch.equal(p, q)


def test_non_finite_input_raises():
    X_var, X_inv = toy_data()
    X_inv[0, 0] = np.nan
    state = init_state(6, 10, ENC, INTER, TrainConfig(total_steps=1, warm_steps=1, align_only_steps=0))
    with pytest.raises(FloatingPointError):
        train_step(state, batch_of(X_var, X_inv), 0)


def test_zero_steps_and_embed():
    X_var, X_inv = toy_data()
    state = init_state(6, 10, ENC, INTER, TrainConfig(total_steps=0, warm_steps=0, align_only_steps=0))
    run_schedule(state, X_var, X_inv)
    assert state.log == []
    out = embed(state.model, X_var, X_inv)
    assert set(out) == {"variant_stream", "anchor_stream", "refined_anchor", "fused"}
    assert all(v.shape == (40, 8) and np.isfinite(v).all() for v in out.values())


def test_schedule_validation():
    with pytest.raises(ValueError):
        TrainConfig(total_steps=5, warm_steps=6)
    with pytest.raises(ValueError):
        TrainConfig(align_only_steps=5000, warm_steps=4000)


def train_small(seed, steps=12, **kw):
    X_var, X_inv = toy_data()
    cfg = TrainConfig(total_steps=steps, warm_steps=steps // 2, align_only_steps=steps // 4, seed=seed, **kw)
    state = init_state(6, 10, ENC, INTER, cfg)
    run_schedule(state, X_var, X_inv, domains=np.array(["A", "B"] * 20))
    return state, embed(state.model, X_var, X_inv)


def test_training_deterministic():
    _, a = train_small(3)
    _, b = train_small(3)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_reconstruction_decreases():
    state, _ = train_small(0, steps=80)
    rec = [r["rec_inv"] for r in state.log]
    assert np.mean(rec[-10:]) < np.mean(rec[:10])


def test_mixup_and_minibatch_paths(tmp_path):
    state, out = train_small(1, steps=8, mixup=True, mixup_k=5, batch_size=16)
    assert len(state.log) == 8
    assert np.isfinite(out["fused"]).all()
    write_training_log(state.log, tmp_path / "log.tsv")
    lines = (tmp_path / "log.tsv").read_text().splitlines()
    header = lines[0].split("\t")
    assert header[1:1 + len(LOSS_TERMS)] == list(LOSS_TERMS) and len(lines) == 9


def test_mixup_requires_domains():
    X_var, X_inv = toy_data()
    state = init_state(6, 10, ENC, INTER, TrainConfig(total_steps=1, warm_steps=1, align_only_steps=0, mixup=True))
    with pytest.raises(ValueError):
        run_schedule(state, X_var, X_inv)


def test_rebuild_column_matches_clock():
    state, _ = train_small(0, steps=30)
    rebuilt = [r["step"] for r in state.log if r["rebuild"]]
    assert rebuilt == [0, 25]
