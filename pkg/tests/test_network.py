import numpy as np
import pytest

from nalsuper import tensor as T
from nalsuper.errors import DimensionError, FormatError, UsageError
from nalsuper.network import (
    ModelConfig,
    checkpoint_bytes,
    forward,
    forward_features,
    init_model,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from nalsuper.text import DEFAULT_PROMPTS, embed_prompts
from nalsuper.verify import randomize_zero_layers


def make(channels=4, blocks=2, dtype="float64", seed=0, **kw):
    cfg = ModelConfig(channels=channels, num_blocks=blocks, attention_dim=8, d_tau=16, seed=seed, dtype=dtype, **kw)
    return init_model(cfg, embed_prompts(DEFAULT_PROMPTS, 16, seed))


def expected_count(c, n, d, d_tau, m, r=1, learnable=False):
    # written out layer by layer, independently of the library formula
    shallow = 3 * c * 9 + c
    pre = c * c * 9 + c
    tcm = c * d + d * d_tau + d * d_tau + m + d * c
    mid = c // r
    ca = (c * mid + mid) + (mid * c + c)
    pa = (c * mid + mid) + (mid * 1 + 1)
    w = 3 * c
    qkv = 3 * ((w * w + w) + (w * 9 + w))
    out = w * c + c
    block = pre + tcm + ca + pa + qkv + out + (1 if learnable else 0)
    recon = (n * c * c + c) + (c * 3 * 9 + 3)
    return shallow + n * block + recon


@pytest.mark.parametrize("c,n,r,learnable", [(4, 2, 1, False), (8, 3, 2, False), (6, 5, 3, True), (8, 8, 1, False)])
def test_parameter_count_closed_form(c, n, r, learnable):
    cfg = ModelConfig(channels=c, num_blocks=n, attention_dim=16, d_tau=32, reduction=r,
                      delta_mode="learnable" if learnable else "fixed")
    model = init_model(cfg, embed_prompts(DEFAULT_PROMPTS, 32))
    assert model.num_parameters() == expected_count(c, n, 16, 32, 2, r, learnable)
    assert parameter_count(c, n, 16, 32, 2, r, learnable) == model.num_parameters()


def test_known_small_count():
    assert expected_count(4, 2, 16, 32, 2) == 4753


def test_identity_at_init_bitwise():
    model = make()
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.uniform(0, 1, (3, 7, 9))
        np.testing.assert_array_equal(forward(model, x).data, x)


def test_feature_shapes():
    model = make(channels=4, blocks=3)
    _, feats = forward_features(model, np.zeros((3, 6, 5)))
    assert feats["F_0"].shape == (4, 6, 5)
    assert feats["F_3"].shape == (4, 6, 5)
    assert feats["F_con"].shape == (12, 6, 5)


def test_init_is_deterministic_and_seed_dependent():
    a, b, c = make(seed=1), make(seed=1), make(seed=2)
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)
    assert not np.array_equal(a.shallow_conv.weight.data, c.shallow_conv.weight.data)


def test_embeddings_not_among_parameters():
    names = [n for n, _ in make().named_parameters()]
    assert not any("embedding" in n for n in names)
    assert len(names) == len(set(names))


def test_rejects_bad_inputs():
    model = make()
    with pytest.raises(DimensionError):
        forward(model, np.zeros((1, 8, 8)))
    with pytest.raises(DimensionError):
        forward(model, np.zeros((3, 2, 8)))
    with pytest.raises(UsageError):
        ModelConfig(num_blocks=0)
    with pytest.raises(UsageError):
        ModelConfig(channels=6, reduction=4)
    with pytest.raises(UsageError):
        init_model(ModelConfig(d_tau=8), embed_prompts(DEFAULT_PROMPTS, 16))


def test_checkpoint_round_trip(tmp_path):
    model = make(dtype="float32")
    randomize_zero_layers(model, 3)
    path = tmp_path / "m.nlsc"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.config == model.config
    assert back.embeddings.prompts == model.embeddings.prompts
    x = np.random.default_rng(1).uniform(0, 1, (3, 8, 8))
    np.testing.assert_array_equal(forward(back, x).data, forward(model, x).data)
    assert checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_is_deterministic(tmp_path):
    assert checkpoint_bytes(make(dtype="float32", seed=4)) == checkpoint_bytes(make(dtype="float32", seed=4))


def test_checkpoint_corrupted_magic(tmp_path):
    path = tmp_path / "m.nlsc"
    save_checkpoint(make(), path)
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"ABCD"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.nlsc"
    save_checkpoint(make(), path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(FormatError, match="offset"):
        load_checkpoint(path)


def test_checkpoint_block_count_mismatch(tmp_path):
    path = tmp_path / "m.nlsc"
    save_checkpoint(make(blocks=3), path)
    with pytest.raises(DimensionError):
        load_checkpoint(path, ModelConfig(channels=4, num_blocks=5, attention_dim=8, d_tau=16))


def test_gradient_flows_to_all_parameters():
    model = make()
    randomize_zero_layers(model, 1)
    x = np.random.default_rng(2).uniform(0, 1, (3, 6, 6))
    T.backward(T.sum_all(T.square(forward(model, x))))
    dead = [n for n, p in model.named_parameters() if p.grad is None]
    assert not dead
