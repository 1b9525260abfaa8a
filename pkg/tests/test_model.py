import numpy as np
import pytest

from recurbench.data import PAD, DocumentStream, stack_documents
from recurbench.gradcheck import check_gradients
from recurbench.model import Model, ModelConfig, load_checkpoint, save_checkpoint
from recurbench.tensor import Tensor, cross_entropy

from helpers import ReplayBank


def tiny(**kw):
    base = dict(n_layers=2, d_model=8, n_heads=2, d_ff=16, vocab_size=11, seg_len=4, mem_len=4,
                scheme="same_layer", dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(rng, T, L, V, B=2, targets=None, labels=None):
    streams = [DocumentStream(b, rng.integers(4, V, (T, L)), np.full(T, L)) for b in range(B)]
    return stack_documents(streams, targets, labels)


def test_config_validation():
    with pytest.raises(ValueError):
        tiny(scheme="bogus")
    with pytest.raises(ValueError):
        tiny(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig.from_dict({**tiny().to_dict(), "extra": 1})
    assert ModelConfig.from_dict(tiny().to_dict()) == tiny()


def test_scheme_degeneracy_with_zero_memory():
    rng = np.random.default_rng(0)
    for trial in range(20):
        N = int(rng.integers(1, 4))
        L = int(rng.integers(2, 6))
        mode = "ar" if trial % 2 == 0 else "mlm"
        outs = []
        for scheme in ("none", "shift_down", "same_layer"):
            cfg = tiny(n_layers=N, seg_len=L, mem_len=0, scheme=scheme, mode=mode)
            model = Model(cfg, seed=trial)
            batch = random_batch(np.random.default_rng(trial), 3, L, cfg.vocab_size)
            res, _ = model.forward_document(batch, retrospective=bool(trial % 3 == 0))
            outs.append([o.logits.data for o in res])
        for other in outs[1:]:
            for a, b in zip(outs[0], other):
                assert np.array_equal(a, b)


def test_causal_perturbation_only_affects_later_positions():
    rng = np.random.default_rng(1)
    model = Model(tiny(seg_len=6), seed=3)
    tokens = rng.integers(4, 11, (1, 6))
    base = model.forward_segment(tokens, model.new_bank(1)).logits.data
    for i in range(6):
        t2 = tokens.copy()
        t2[0, i] = 4 + (t2[0, i] - 3) % 7
        moved = model.forward_segment(t2, model.new_bank(1)).logits.data
        assert np.array_equal(base[0, :i], moved[0, :i])
        assert np.abs(base[0, i:] - moved[0, i:]).max() > 0


def test_segment_length_checks():
    model = Model(tiny(), seed=0)
    with pytest.raises(ValueError):
        model.forward_segment(np.full((1, 5), 4), model.new_bank(1))
    with pytest.raises(ValueError):
        model.forward_segment(np.full((1, 3), 4), model.new_bank(1))
    out = model.forward_segment(np.full((1, 3), 4), model.new_bank(1), final=True)
    assert out.logits.shape == (1, 4, 11)


def test_forward_document_deterministic_and_empty():
    rng = np.random.default_rng(2)
    model = Model(tiny(dropout=0.2), seed=1)
    batch = random_batch(rng, 3, 4, 11)
    a, _ = model.forward_document(batch, retrospective=True, rng=np.random.default_rng(9))
    b, _ = model.forward_document(batch, retrospective=True, rng=np.random.default_rng(9))
    for x, y in zip(a, b):
        assert np.array_equal(x.logits.data, y.logits.data)
    empty = random_batch(rng, 1, 4, 11)
    empty.tokens = empty.tokens[:0]
    with pytest.raises(ValueError):
        model.forward_document(empty)


def test_single_segment_two_phase_is_finite():
    model = Model(tiny(), seed=1)
    batch = random_batch(np.random.default_rng(3), 1, 4, 11)
    outs, skim = model.forward_document(batch, retrospective=True)
    assert len(outs) == len(skim) == 1
    assert np.isfinite(outs[0].logits.data).all()
    assert not np.array_equal(outs[0].logits.data, skim[0].logits.data)


def _top(model, batch, retro):
    outs, _ = model.forward_document(batch, retrospective=retro)
    return outs[0].hidden[-1].data


@pytest.mark.parametrize("mode", ["ar", "mlm"])
def test_two_phase_carries_late_context_to_first_segment(mode):
    rng = np.random.default_rng(4)
    model = Model(tiny(mode=mode), seed=2)
    batch = random_batch(rng, 3, 4, 11, B=1)
    altered = random_batch(rng, 3, 4, 11, B=1)
    altered.tokens = batch.tokens.copy()
    altered.tokens[2, 0, 1] = 4 + (batch.tokens[2, 0, 1] - 3) % 7
    assert np.abs(_top(model, batch, True) - _top(model, altered, True)).max() > 0
    assert np.array_equal(_top(model, batch, False), _top(model, altered, False))


def test_hand_computed_cross_entropy():
    logits = np.array([[[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]]])
    targets = np.array([[1, 2]])
    by_hand = np.mean([-(2.0 - np.log(np.exp(1) + np.exp(2) + np.exp(0.5))),
                       -(3.0 - np.log(1 + np.exp(-1) + np.exp(3)))])
    assert abs(cross_entropy(Tensor(logits), targets, ignore_index=-1).data - by_hand) < 1e-12


def test_mlm_loss_terms():
    rng = np.random.default_rng(5)
    cfg = tiny(mode="mlm", max_chunks=3)
    model = Model(cfg, seed=3)
    batch = random_batch(rng, 2, 4, 11, targets=np.zeros((2, 2, 4), dtype=int), labels=[4, 7])
    outs, _ = model.forward_document(batch)
    # no masked tokens, tau < T: loss is exactly zero and nothing reaches the classifier
    model.zero_grad()
    loss0 = model.segment_loss(outs[0], batch.targets[0], batch.reorder_labels, batch.final_lanes(0))
    assert float(loss0.data) == 0.0
    loss0.backward()
    assert model.cls_w2.grad is None or not model.cls_w2.grad.any()
    model.zero_grad()
    loss1 = model.segment_loss(outs[1], batch.targets[1], batch.reorder_labels, batch.final_lanes(1))
    loss1.backward()
    assert np.abs(model.cls_w2.grad).max() > 0
    with pytest.raises(ValueError):
        model.segment_loss(outs[1], batch.targets[1], np.array([9, 0]), batch.final_lanes(1))


def test_retro_loss_leaves_skim_graph_untouched():
    rng = np.random.default_rng(6)
    model = Model(tiny(), seed=4)
    batch = random_batch(rng, 3, 4, 11)
    outs, skim = model.forward_document(batch, retrospective=True, grad_skim=True)
    model.document_loss(batch, outs).backward()
    for out in skim:
        for h in out.hidden:
            assert h.grad is None


@pytest.mark.parametrize("mode,retro", [("ar", False), ("ar", True), ("mlm", True)])
def test_end_to_end_gradients(mode, retro, backend):
    rng = np.random.default_rng(7)
    cfg = tiny(mode=mode, dropout=0.1, loss_phases="both" if retro else "retro")
    model = Model(cfg, seed=5)
    for t in model.named_parameters().values():  # non-trivial biases
        if t.ndim == 1 or t.shape[0] == cfg.n_heads:
            t.data = t.data + rng.normal(0, 0.1, t.shape)
    targets = rng.integers(4, 11, (2, 2, 4)) * (rng.random((2, 2, 4)) < 0.5)
    batch = random_batch(rng, 2, 4, 11, targets=targets if mode == "mlm" else None,
                         labels=[3, 8] if mode == "mlm" else None)

    bank = ReplayBank(cfg.scheme, cfg.n_layers, cfg.mem_len, 2, cfg.d_model)

    def loss():
        bank.calls = 0
        outs, skim = model.forward_document(batch, retrospective=retro, rng=np.random.default_rng(11),
                                            bank=bank)
        bank.replay = True
        return model.document_loss(batch, outs, skim)

    errors = check_gradients(loss, model.named_parameters(), max_entries=12)
    assert max(errors.values()) < 1e-3, errors


def test_checkpoint_roundtrip(tmp_path):
    model = Model(tiny(scheme="shift_down"), seed=6)
    path = tmp_path / "m.npz"
    save_checkpoint(path, model, meta={"note": "x"})
    back, meta, _ = load_checkpoint(path)
    assert meta["note"] == "x" and back.cfg == model.cfg
    tokens = np.random.default_rng(0).integers(4, 11, (1, 4))
    a = model.forward_segment(tokens, model.new_bank(1)).logits.data
    b = back.forward_segment(tokens, back.new_bank(1)).logits.data
    assert np.array_equal(a, b)


def test_padding_positions_do_not_change_real_outputs():
    model = Model(tiny(), seed=7)
    tokens = np.array([[5, 6, 7, PAD]])
    a = model.forward_segment(tokens, model.new_bank(1)).logits.data
    tokens2 = np.array([[5, 6, 7, 9]])
    b = model.forward_segment(tokens2, model.new_bank(1), real=np.array([[1, 1, 1, 0]], bool)).logits.data
    np.testing.assert_array_equal(a[0, :3], b[0, :3])
