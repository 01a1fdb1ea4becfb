import struct
import zlib

import numpy as np
import pytest

from seqsort.model import (MODEL_PRESETS, CheckpointFormatError, ModelConfig, OrderNet, concat_head_params,
                           extract_trunk, load_checkpoint, make_checkpoint, matched_concat_width,
                           model_from_checkpoint, opn_head_params, preset_config, save_checkpoint)
from seqsort.tensor import CacheError, ShapeError, make_rng

SMALL = dict(conv1=4, conv2=4, fc6=8, pair_width=4)


def batch(n=4, N=3, P=32, seed=0):
    return make_rng(seed, "x").random((N, n, 3, P, P)).astype(np.float32)


@pytest.mark.parametrize("n,K", [(3, 3), (4, 12), (5, 60)])
def test_output_shape(n, K):
    m = OrderNet(ModelConfig(n=n, **SMALL))
    assert m.forward(batch(n)).shape == (3, K)


def test_opn_head_has_one_unit_per_pair():
    m = OrderNet(ModelConfig(**SMALL))
    names = {k.split(".")[1] for k in m.params() if k.startswith("head.pair")}
    assert names == {f"pair_{i}_{j}" for i in range(4) for j in range(i + 1, 4)}


def test_trunk_weights_are_shared_across_branches():
    m = OrderNet(ModelConfig(**SMALL))
    a, b = m.branch_params(0), m.branch_params(3)
    assert all(a[k] is b[k] for k in a)
    # each branch sees the same function: swapping frames permutes the features
    x = batch()
    f = m.features(x)
    g = m.features(x[:, ::-1].copy())
    assert np.allclose(f[:, ::-1], g, atol=1e-6)


def test_shared_pair_weights_option():
    m = OrderNet(ModelConfig(share_pairs=True, **SMALL))
    assert {k.split(".")[1] for k in m.params() if k.startswith("head.pair")} == {"pair_shared"}
    assert m.forward(batch()).shape == (3, 12)


def test_concat_head_matches_parameter_budget():
    cfg = ModelConfig(head="concat")
    h = matched_concat_width(cfg)
    assert concat_head_params(cfg, h) >= opn_head_params(cfg) > concat_head_params(cfg, h - 1)
    opn = OrderNet(ModelConfig())
    cat = OrderNet(cfg)
    assert opn.num_params("head.") == opn_head_params(ModelConfig())
    assert cat.num_params("head.") == concat_head_params(cfg, h)
    # matched within one hidden unit's worth of parameters
    assert abs(cat.num_params() - opn.num_params()) / opn.num_params() < 0.01


def test_eval_mode_is_deterministic_and_batch_independent():
    m = OrderNet(ModelConfig(**SMALL))
    x = batch(N=4)
    a = m.forward(x)
    b = np.concatenate([m.forward(x[:1]), m.forward(x[1:])])
    assert np.allclose(a, b, atol=1e-6)


def test_shape_errors():
    m = OrderNet(ModelConfig(**SMALL))
    with pytest.raises(ShapeError):
        m.forward(batch(n=3))
    with pytest.raises(ShapeError):
        m.forward(batch(P=24))
    with pytest.raises(ShapeError):
        m.forward(batch(N=1), train=True, rng=make_rng(0))
    with pytest.raises(CacheError):
        OrderNet(ModelConfig(**SMALL)).backward(np.zeros((3, 12), np.float32))
    with pytest.raises(ShapeError):
        ModelConfig(head="mlp").validate()


def test_presets():
    assert preset_config("tiny") == ModelConfig()
    assert preset_config("small").fc6 == MODEL_PRESETS["small"]["fc6"]
    with pytest.raises(ShapeError):
        preset_config("huge")


# --- checkpoints ---------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    m = OrderNet(ModelConfig(head="concat", **SMALL), seed=3)
    ck = make_checkpoint(m, step=17, hyper={"train.lr0": "0.05"})
    p1 = save_checkpoint(tmp_path / "a.opnc", ck)
    back = load_checkpoint(p1)
    assert back.step == 17 and back.hyper["train.lr0"] == "0.05"
    assert back.model_config() == m.cfg
    p2 = save_checkpoint(tmp_path / "b.opnc", back)
    assert p1.read_bytes() == p2.read_bytes()
    m2 = model_from_checkpoint(back)
    x = batch()
    assert m.forward(x).tobytes() == m2.forward(x).tobytes()
    assert not (tmp_path / "a.opnc.tmp").exists()


def test_checkpoint_header_layout(tmp_path):
    data = save_checkpoint(tmp_path / "a.opnc", make_checkpoint(OrderNet(ModelConfig(**SMALL)))).read_bytes()
    assert data[:4] == b"OPNC"
    version, tlen = struct.unpack_from("<HI", data, 4)
    assert version == 1
    text = data[10:10 + tlen].decode()
    assert "model.head=opn\n" in text and text.endswith("step=0\n")
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])


def _resign(d):
    return d[:-4] + struct.pack("<I", zlib.crc32(d[:-4]))


@pytest.mark.parametrize("mutate,match", [
    (lambda d: b"NOPE" + d[4:], "magic"),
    (lambda d: _resign(d[:4] + struct.pack("<H", 2) + d[6:]), "version"),
    (lambda d: d[:40] + bytes([d[40] ^ 0xFF]) + d[41:], "checksum"),
    (lambda d: _resign(d[:-4] + b"\0\0" + d[-4:]), "trailing"),
    (lambda d: d[:8], "short"),
])
def test_corrupt_checkpoints_are_rejected(tmp_path, mutate, match):
    p = save_checkpoint(tmp_path / "a.opnc", make_checkpoint(OrderNet(ModelConfig(**SMALL))))
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(CheckpointFormatError, match=match):
        load_checkpoint(p)


def test_load_state_strict():
    m = OrderNet(ModelConfig(**SMALL))
    st = dict(m.state())
    st.pop("param/head.cls.w")
    with pytest.raises(ShapeError, match="missing"):
        OrderNet(ModelConfig(**SMALL)).load_state(st)
    wrong = OrderNet(ModelConfig(conv1=8, conv2=4, fc6=8, pair_width=4)).state()
    with pytest.raises(ShapeError):
        m.load_state(wrong)


def test_extract_trunk_keeps_only_conv_layers():
    m = OrderNet(ModelConfig(**SMALL))
    t = extract_trunk(make_checkpoint(m))
    layers = {k.split("/")[1].split(".")[1] for k in t}
    assert layers == {"conv1", "bn1", "conv2", "bn2"}
    assert "buffer/trunk.bn1.running_mean" in t
    assert {k.split("/")[1].split(".")[1] for k in extract_trunk(make_checkpoint(m), include_fc6=True)} >= {"fc6", "bn6"}


def test_identical_frames_give_identical_branch_features():
    m = OrderNet(ModelConfig(**SMALL))
    frame = make_rng(3, "f").random((2, 1, 3, 32, 32)).astype(np.float32)
    f = m.features(np.repeat(frame, 4, axis=1))
    for b in range(1, 4):
        assert np.array_equal(f[:, 0], f[:, b])


def test_zero_upstream_gradient_gives_zero_grads():
    m = OrderNet(ModelConfig(**SMALL))
    logits = m.forward(batch(), train=True, rng=make_rng(0))
    m.zero_grad()
    m.backward(np.zeros_like(logits))
    assert all(not p.grad.any() for p in m.params().values())


def test_duplicated_sample_doubles_its_gradient_in_eval_mode():
    # with batch norm in eval mode samples do not interact, so gradients add
    m = OrderNet(ModelConfig(**SMALL))
    x = batch(N=1)
    d = make_rng(1, "d").standard_normal((1, 12)).astype(np.float32)
    m.zero_grad()
    m.forward(x, train=False)
    m.backward(d)
    single = {k: p.grad.copy() for k, p in m.params().items()}
    m.zero_grad()
    m.forward(np.concatenate([x, x]), train=False)
    m.backward(np.concatenate([d, d]))
    for k, p in m.params().items():
        assert np.allclose(p.grad, 2 * single[k], rtol=1e-4, atol=1e-7), k


def test_export_import_gives_identical_conv_activations(tmp_path):
    m = OrderNet(ModelConfig(**SMALL), seed=5)
    m.forward(batch(N=4), train=True, rng=make_rng(0))  # move BN running stats off their init
    path = save_checkpoint(tmp_path / "m.opnc", make_checkpoint(m))
    m2 = model_from_checkpoint(load_checkpoint(path))
    x = batch(seed=9)
    assert np.array_equal(m.features(x), m2.features(x))


def test_classifier_init_std():
    big = OrderNet(ModelConfig(n=5, conv1=4, conv2=4, fc6=8, pair_width=20))  # 10 pairs * 20 -> 200 x 60
    w = big.params()["head.cls.w"].value
    assert w.size >= 10_000
    assert abs(w.std() - 0.005) < 0.0005


def test_transferred_tensors_exclude_the_pretext_head():
    m = OrderNet(ModelConfig(**SMALL))
    tensors = extract_trunk(make_checkpoint(m), include_fc6=True)
    head = {k for k in m.state() if ".head." in f".{k.partition('/')[2]}"}
    assert head and not set(tensors) & head
    assert all(k.partition("/")[2].startswith("trunk.") for k in tensors)
