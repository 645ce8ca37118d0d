import numpy as np
import pytest

from oracles import ref_delta, ref_lstm, ref_softmax
from vsr.layers import DeltaWindow, FcLayer, fc_init
from vsr.model import (
    CheckpointError,
    EncoderStack,
    astype_model,
    build_fusion,
    build_stream,
    clip_group,
    fusion_forward,
    load_checkpoint,
    named_params,
    predict_label,
    save_checkpoint,
    stream_forward,
    stream_forward_batch,
)
from vsr.numerics import Rng


def tiny_stream(classes=3, kind="raw", seed=0, dtype=np.float64, hidden=3):
    return build_stream(input_dim=6, classes=classes, hidden=hidden, rng=Rng(seed),
                        stream_kind=kind, encoder_sizes=(5, 4), bottleneck=2,
                        theta=2, dtype=dtype)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def test_build_stream_default_architecture_shapes():
    model = build_stream(input_dim=1144, classes=10, hidden=20, rng=Rng(0))
    enc = model.net.encoder
    assert [l.w.shape for l in enc] == [(2000, 1144), (1000, 2000),
                                        (500, 1000), (50, 500)]
    assert [l.activation for l in enc] == ["relu", "relu", "relu", "linear"]
    assert model.net.blstm.fwd.wx.shape == (80, 150)  # 4H x 3*bottleneck
    assert model.head.w.shape == (10, 40)
    assert model.net.delta.theta == 2


def test_build_stream_reproducible_and_seed_sensitive():
    a = named_params(tiny_stream(seed=5))
    b = named_params(tiny_stream(seed=5))
    c = named_params(tiny_stream(seed=6))
    assert set(a) == set(b) == set(c)
    for name in a:
        assert np.array_equal(a[name], b[name]), name
    assert any(not np.array_equal(a[n], c[n]) for n in a)


def test_build_stream_accepts_matching_pretrained_encoder():
    rng = Rng(1)
    enc = [fc_init(6, 5, rng, "relu", np.float64),
           fc_init(5, 4, rng, "relu", np.float64),
           fc_init(4, 2, rng, "linear", np.float64)]
    model = build_stream(input_dim=6, classes=3, hidden=3, rng=Rng(2),
                         stream_kind="raw", encoder_init=enc,
                         encoder_sizes=(5, 4), bottleneck=2, dtype=np.float64)
    assert np.array_equal(model.net.encoder[0].w, enc[0].w)
    # the model owns a copy: mutating it leaves the source untouched
    model.net.encoder[0].w[0, 0] += 1.0
    assert model.net.encoder[0].w[0, 0] != enc[0].w[0, 0]


def test_build_stream_rejects_mismatched_encoder():
    enc = [fc_init(7, 5, Rng(0), "relu")]
    with pytest.raises(ValueError, match="shapes"):
        build_stream(input_dim=6, classes=3, rng=Rng(0), encoder_init=enc,
                     encoder_sizes=(5,), bottleneck=2)


def test_build_fusion_checks_streams():
    raw = tiny_stream(kind="raw")
    diff = tiny_stream(kind="diff", seed=1)
    fused = build_fusion(raw, diff, hidden=4, rng=Rng(3), dtype=np.float64)
    assert fused.fusion_blstm.fwd.wx.shape == (16, 12)  # input 2*3 + 2*3
    assert fused.out.w.shape == (3, 8)
    with pytest.raises(ValueError, match="raw and a diff"):
        build_fusion(raw, raw)
    with pytest.raises(ValueError, match="class"):
        build_fusion(raw, tiny_stream(classes=4, kind="diff"))


def test_build_fusion_copies_stream_weights():
    raw = tiny_stream(kind="raw")
    diff = tiny_stream(kind="diff", seed=1)
    fused = build_fusion(raw, diff, hidden=3, rng=Rng(0), dtype=np.float64)
    assert np.array_equal(fused.raw.encoder[0].w, raw.net.encoder[0].w)
    fused.raw.encoder[0].w += 1.0
    assert not np.array_equal(fused.raw.encoder[0].w, raw.net.encoder[0].w)


def test_named_params_cover_everything_once():
    model = tiny_stream()
    names = list(named_params(model))
    assert len(names) == len(set(names))
    assert "enc0.w" in names and "head.b" in names
    assert "blstm.fwd.wx" in names and "blstm.bwd.b" in names

    fused = build_fusion(tiny_stream(kind="raw"), tiny_stream(kind="diff", seed=1),
                         hidden=3, rng=Rng(0), dtype=np.float64)
    fnames = list(named_params(fused))
    assert "raw.enc0.w" in fnames and "diff.blstm.fwd.wx" in fnames
    assert "fusion_blstm.bwd.wh" in fnames and "out.w" in fnames


def test_clip_group_selects_recurrent_tensors():
    model = tiny_stream()
    names = named_params(model)
    group = clip_group(names)
    assert all("blstm" in n for n in group)
    assert any(n.startswith("blstm.fwd") for n in group)
    assert "head.w" not in group and "enc0.w" not in group


# ---------------------------------------------------------------------------
# forward composition
# ---------------------------------------------------------------------------

def test_stream_forward_matches_stagewise_reference():
    """Recompute encoder -> deltas -> BLSTM -> head with the plain oracles."""
    model = tiny_stream(dtype=np.float64)
    rng = Rng(9)
    seq = rng.normal((7, 6))
    got, _ = stream_forward(model, seq)

    x = seq
    for layer in model.net.encoder:
        pre = x @ layer.w.T + layer.b
        x = np.maximum(pre, 0) if layer.activation == "relu" else pre
    d1 = ref_delta(x, 2)
    d2 = ref_delta(d1, 2)
    feats = np.concatenate([x, d1, d2], axis=1)
    bl = model.net.blstm
    h = np.concatenate([ref_lstm(bl.fwd.wx, bl.fwd.wh, bl.fwd.b, feats),
                        ref_lstm(bl.bwd.wx, bl.bwd.wh, bl.bwd.b, feats, reverse=True)],
                       axis=1)
    want = h @ model.head.w.T + model.head.b
    assert got.shape == (7, 3)
    assert np.allclose(got, want, atol=1e-10)


def test_stream_forward_batch_matches_singles():
    model = tiny_stream(dtype=np.float64)
    rng = Rng(10)
    seqs = [rng.normal((t, 6)) for t in (3, 5, 2)]
    stacked, _ = stream_forward_batch(model, seqs)
    assert stacked.shape == (10, 3)
    singles = [stream_forward(model, s)[0] for s in seqs]
    assert np.allclose(stacked, np.concatenate(singles), atol=1e-10)


def test_stream_forward_single_frame():
    model = tiny_stream(dtype=np.float64)
    logits, _ = stream_forward(model, Rng(11).normal((1, 6)))
    assert logits.shape == (1, 3)
    assert np.all(np.isfinite(logits))


def test_fusion_forward_matches_manual_concat():
    raw = tiny_stream(kind="raw", dtype=np.float64)
    diff = tiny_stream(kind="diff", seed=1, dtype=np.float64)
    fused = build_fusion(raw, diff, hidden=3, rng=Rng(4), dtype=np.float64)
    rng = Rng(12)
    seq_raw, seq_diff = rng.normal((5, 6)), rng.normal((5, 6))
    logits, _ = fusion_forward(fused, {"raw": seq_raw, "diff": seq_diff})

    from vsr.model import net_forward_single
    h_raw = net_forward_single(fused.raw, seq_raw)
    h_diff = net_forward_single(fused.diff, seq_diff)
    joint = np.concatenate([h_raw, h_diff], axis=1)
    bl = fused.fusion_blstm
    h = np.concatenate([ref_lstm(bl.fwd.wx, bl.fwd.wh, bl.fwd.b, joint),
                        ref_lstm(bl.bwd.wx, bl.bwd.wh, bl.bwd.b, joint, reverse=True)],
                       axis=1)
    want = h @ fused.out.w.T + fused.out.b
    assert np.allclose(logits, want, atol=1e-10)


def test_fusion_rejects_length_mismatch():
    fused = build_fusion(tiny_stream(kind="raw"), tiny_stream(kind="diff", seed=1),
                         hidden=3, rng=Rng(0), dtype=np.float64)
    rng = Rng(13)
    with pytest.raises(ValueError, match="length"):
        fusion_forward(fused, {"raw": rng.normal((4, 6)),
                               "diff": rng.normal((5, 6))})


def test_fusion_head_zeroed_outputs_its_bias():
    fused = build_fusion(tiny_stream(kind="raw"), tiny_stream(kind="diff", seed=1),
                         hidden=3, rng=Rng(0), dtype=np.float64)
    fused.out.w[:] = 0.0
    fused.out.b[:] = np.array([1.0, -2.0, 0.5])
    rng = Rng(14)
    logits, _ = fusion_forward(fused, {"raw": rng.normal((4, 6)),
                                       "diff": rng.normal((4, 6))})
    assert np.allclose(logits, [1.0, -2.0, 0.5], atol=1e-12)


# ---------------------------------------------------------------------------
# utterance-level prediction
# ---------------------------------------------------------------------------

def one_hotish(rows, scale=10.0):
    """Logits whose per-frame argmax follows rows."""
    out = np.zeros((len(rows), max(rows) + 1))
    for t, k in enumerate(rows):
        out[t, k] = scale
    return out


def test_predict_label_majority():
    assert predict_label(one_hotish([0, 0, 1])) == 0
    assert predict_label(one_hotish([2, 1, 2, 0, 2])) == 2
    assert predict_label(one_hotish([1])) == 1


def test_predict_label_tie_breaks_on_summed_posterior():
    # frame 0 votes class 0, frame 1 votes class 1; class 1 holds the
    # larger summed posterior (0.35 + 0.60 vs 0.55 + 0.35 for class 0).
    logits = np.log(np.array([[0.55, 0.35, 0.10],
                              [0.35, 0.60, 0.05]]))
    assert predict_label(logits) == 1
    # flip the balance and the tie resolves the other way
    logits2 = np.log(np.array([[0.60, 0.35, 0.05],
                               [0.40, 0.55, 0.05]]))
    assert predict_label(logits2) == 0


def test_predict_label_exact_tie_takes_smaller_index():
    logits = np.array([[2.0, 1.0], [1.0, 2.0]])  # mirrored: posteriors tie
    assert predict_label(logits) == 0


def test_predict_label_invariant_to_per_frame_shifts():
    rng = Rng(15)
    logits = rng.normal((6, 4))
    shifted = logits + rng.normal((6,))[:, None]
    assert predict_label(logits) == predict_label(shifted)


def test_predict_label_posterior_tiebreak_matches_reference():
    rng = Rng(16)
    for _ in range(20):
        logits = rng.normal((2, 3))
        votes = np.bincount(np.argmax(logits, axis=1), minlength=3)
        top = np.flatnonzero(votes == votes.max())
        want = top[0]
        if len(top) > 1:
            sums = np.stack([ref_softmax(r) for r in logits]).sum(axis=0)
            best = max(top, key=lambda k: (sums[k], -k))
            want = int(best)
        assert predict_label(logits) == want


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_stream(tmp_path):
    model = tiny_stream(dtype=np.float32)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, extra_meta={"note": "unit"})
    again = load_checkpoint(path)
    meta = again.meta
    assert meta["kind"] == "stream" and meta["stream"] == "raw"
    assert meta["note"] == "unit"
    a, b = named_params(model), named_params(again)
    assert set(a) == set(b)
    for name in a:
        assert np.array_equal(a[name], b[name]), name
    assert again.net.delta.theta == model.net.delta.theta
    # logits agree bit for bit
    seq = Rng(17).normal((4, 6)).astype(np.float32)
    assert np.array_equal(stream_forward(model, seq)[0],
                          stream_forward(again, seq)[0])


def test_checkpoint_roundtrip_fusion(tmp_path):
    fused = build_fusion(tiny_stream(kind="raw"), tiny_stream(kind="diff", seed=1),
                         hidden=3, rng=Rng(5), dtype=np.float64)
    path = tmp_path / "f.ckpt"
    save_checkpoint(path, fused)
    again = load_checkpoint(path)
    assert again.meta["kind"] == "fusion"
    a, b = named_params(fused), named_params(again)
    for name in a:
        # tensors are stored as f32; compare after the same cast
        assert np.array_equal(a[name].astype(np.float32), b[name]), name


def test_checkpoint_roundtrip_encoder_stack(tmp_path):
    rng = Rng(6)
    stack = EncoderStack(layers=[fc_init(8, 5, rng, "relu"),
                                 fc_init(5, 2, rng, "linear")],
                         meta={"kind": "encoder"})
    path = tmp_path / "e.ckpt"
    save_checkpoint(path, stack)
    again = load_checkpoint(path)
    assert isinstance(again, EncoderStack)
    assert [l.activation for l in again.layers] == ["relu", "linear"]
    assert np.array_equal(again.layers[0].w, stack.layers[0].w)


def test_checkpoint_save_load_save_is_byte_identical(tmp_path):
    model = tiny_stream()
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, model)
    again = load_checkpoint(p1)
    save_checkpoint(p2, again)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_magic_pinned(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tiny_stream())
    head = path.read_bytes()[:6]
    assert head[:4] == b"VSRM"
    assert int.from_bytes(head[4:6], "little") == 1


def test_checkpoint_truncation_detected(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, tiny_stream())
    blob = path.read_bytes()
    path.write_bytes(blob[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_trailing_garbage_detected(tmp_path):
    path = tmp_path / "g.ckpt"
    save_checkpoint(path, tiny_stream())
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_bad_magic_detected(tmp_path):
    path = tmp_path / "b.ckpt"
    save_checkpoint(path, tiny_stream())
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_expect_mismatch(tmp_path):
    path = tmp_path / "e.ckpt"
    save_checkpoint(path, tiny_stream(classes=3))
    with pytest.raises(CheckpointError, match="classes"):
        load_checkpoint(path, expect={"classes": "26"})
    model = load_checkpoint(path, expect={"classes": "3"})
    assert model.classes == 3


def test_astype_model_roundtrip():
    model = tiny_stream(dtype=np.float32)
    up = astype_model(model, np.float64)
    assert all(p.dtype == np.float64 for p in named_params(up).values())
    down = astype_model(up, np.float32)
    a, b = named_params(model), named_params(down)
    for name in a:
        assert np.array_equal(a[name], b[name]), name
