import numpy as np
import pytest
import torch

from pipebench import connector as cn
from pipebench.errors import CheckpointError, ShapeError
from pipebench.models import (
    CnnSpec, CompositeModel, CompositeSpec, CoordCNN, DigitTransformer, SequenceLengthError, SymbolicStage,
    TransformerSpec, count_parameters, decode_targets, images_to_input, load_checkpoint, save_checkpoint,
)

SMALL_TR = TransformerSpec(d_model=32, heads=4, layers=2, ff=64, max_len=31)


def test_cnn_output_shape_and_range():
    torch.manual_seed(0)
    cnn = CoordCNN(CnnSpec(height=32, width=32, outputs=6), zero_head=False)
    out = cnn(torch.rand(5, 1, 32, 32))
    assert out.shape == (5, 6)
    assert ((out > 0) & (out < 1)).all()


def test_cnn_zero_head_starts_at_center():
    cnn = CoordCNN(CnnSpec(height=32, width=32, outputs=2))
    assert torch.allclose(cnn(torch.rand(3, 1, 32, 32)), torch.full((3, 2), 0.5))


def test_cnn_rejects_wrong_shape():
    cnn = CoordCNN(CnnSpec(height=32, width=32))
    with pytest.raises(ShapeError):
        cnn(torch.rand(2, 1, 16, 16))


def test_cnn_rejects_input_smaller_than_pooling():
    with pytest.raises(ValueError):
        CnnSpec(height=8, width=8)
    assert CnnSpec(height=30, width=30).feature_hw == (1, 1)


def test_parameter_counts():
    assert count_parameters(CoordCNN(CnnSpec(height=64, width=64, outputs=6))) == 623_238
    assert count_parameters(DigitTransformer(TransformerSpec())) == 800_910


def test_images_to_input_polarity():
    img = np.array([[[255, 0]]], dtype=np.uint8)
    x = images_to_input(img)
    assert x.shape == (1, 1, 1, 2)
    assert x[0, 0, 0].tolist() == [0.0, 1.0]


def test_transformer_is_causal():
    torch.manual_seed(0)
    model = DigitTransformer(SMALL_TR).eval()
    ids = torch.randint(0, 14, (2, 20))
    base = model(ids)
    changed = ids.clone()
    changed[:, 12:] = (changed[:, 12:] + 1) % 14
    after = model(changed)
    assert torch.allclose(base[:, :12], after[:, :12], atol=1e-6)
    assert not torch.allclose(base[:, 12:], after[:, 12:])


def test_transformer_probabilities_sum_to_one():
    model = DigitTransformer(SMALL_TR)
    p = torch.softmax(model(torch.randint(0, 14, (3, 10))), -1)
    assert torch.allclose(p.sum(-1), torch.ones(3, 10), atol=1e-6)


def test_transformer_length_limit():
    model = DigitTransformer(SMALL_TR)
    with pytest.raises(SequenceLengthError):
        model(torch.zeros(1, 32, dtype=torch.long))


def test_cached_generation_matches_full_recompute():
    torch.manual_seed(1)
    model = DigitTransformer(SMALL_TR).eval()
    prefix = torch.randint(0, 14, (4, 24))
    fast = model.generate(prefix, 7)
    seq = prefix
    with torch.no_grad():
        for _ in range(7):
            nxt = model(seq)[:, -1].argmax(-1, keepdim=True)
            seq = torch.cat([seq, nxt], 1)
    assert torch.equal(fast, seq[:, 24:])


def test_decode_targets_flags_malformed_rows():
    rows = np.array([[5, 1, 7, 10, 8, 9, 8], [5, 1, 7, 13, 8, 9, 8]])
    assert decode_targets(rows, 3) == [(0.517, 0.898), None]


def test_transformer_overfits_tiny_set():
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    ctx = rng.integers(100, 900, size=(8, 6)) / 1000
    tgt = ctx[:, :2]
    ids = torch.from_numpy(cn.encode_batch(ctx, tgt, 3))
    model = DigitTransformer(SMALL_TR)
    stage = SymbolicStage(model, 3)
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    for _ in range(300):
        opt.zero_grad()
        stage.loss(ids).backward()
        opt.step()
    preds = stage.predict_values(ctx)
    assert preds == [tuple(t) for t in tgt]


def test_cnn_overfits_tiny_set():
    torch.manual_seed(0)
    x = torch.rand(4, 1, 16, 16)
    y = torch.rand(4, 2) * 0.8 + 0.1
    cnn = CoordCNN(CnnSpec(height=16, width=16, outputs=2))
    opt = torch.optim.Adam(cnn.parameters(), lr=1e-3)
    for _ in range(300):
        opt.zero_grad()
        loss = ((cnn(x) - y) ** 2).mean()
        loss.backward()
        opt.step()
    assert float(loss.detach()) < 1e-4


def _small_composite(m=6, d=3):
    spec = CompositeSpec(cnn=CnnSpec(height=16, width=16, outputs=m), format=cn.FormatSpec(d),
                         transformer=TransformerSpec(d_model=32, heads=4, layers=2, ff=64,
                                                     max_len=cn.sequence_length(m, d)))
    torch.manual_seed(0)
    return CompositeModel(spec)


def test_composite_context_matches_connector():
    model = _small_composite()
    with torch.no_grad():
        vals = model.cnn(torch.rand(10, 1, 16, 16))
    toks = model.context_tokens(vals)
    for row, v in zip(toks, vals.double().numpy()):
        expected = cn.encode_batch(v[None], None, 3)[0].tolist() + [cn.SEP]
        assert row.tolist() == expected
    table = model.transformer.tok.weight
    emb = model.context_embeds(vals)
    assert torch.allclose(emb, table[torch.from_numpy(toks)].to(emb.dtype))


def test_composite_gradient_reaches_first_conv():
    model = _small_composite()
    tgt = torch.from_numpy(cn.encode_batch(np.array([[0.25, 0.75], [0.5, 0.125]]), None, 3))
    logits = model(torch.rand(2, 1, 16, 16), tgt)
    assert logits.shape == (2, 7, 14)
    torch.nn.functional.cross_entropy(logits.reshape(-1, 14), tgt.reshape(-1)).backward()
    assert model.cnn.first_conv.weight.grad.abs().max() > 0


def test_composite_spec_checks_context_length():
    with pytest.raises(ValueError):
        CompositeSpec(cnn=CnnSpec(outputs=76), format=cn.FormatSpec(6),
                      transformer=TransformerSpec(max_len=100))
    assert CompositeSpec.build(64, 64).transformer.max_len == 545


def test_checkpoint_round_trip(tmp_path):
    model = _small_composite()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, "composite", model.spec, model)
    loaded = load_checkpoint(path, "composite")
    for (k, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), k


def test_checkpoint_mismatch(tmp_path):
    cnn = CoordCNN(CnnSpec(height=32, width=32))
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, "cnn", cnn.spec, cnn)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, "transformer")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, "cnn", CnnSpec(height=64, width=64))
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(path, "cnn")
