import re

import numpy as np
import pytest
import torch

from speechprior.encoder import (
    CHECKPOINT_NAME_TABLE,
    EncoderConfig,
    MaskSpec,
    build_encoder,
    load_pretrained,
    make_mask,
    preset_config,
    relative_position_bucket,
    require_asset,
    save_encoder,
    verify_golden,
)
from speechprior.errors import AssetError, CheckpointError, ConfigError, DataError


@pytest.fixture(scope="module")
def toy():
    return load_pretrained("toy", seed=0).eval()


def test_presets_satisfy_frame_rate_contract():
    for name in ("toy", "base", "large"):
        cfg = preset_config(name)
        assert cfg.hop == 320
        assert np.prod(cfg.cnn_strides) * cfg.frame_rate_hz == 16000
    large = preset_config("large")
    assert (large.n_layers, large.model_dim) == (24, 1024)
    toy = preset_config("toy")
    assert (toy.n_layers, toy.model_dim) == (4, 64)


def test_bad_config_rejected():
    with pytest.raises(ConfigError):
        EncoderConfig(model_dim=65, n_heads=4)
    with pytest.raises(ConfigError):
        EncoderConfig(frame_rate_hz=100.0)


def test_four_seconds_gives_200_frames(toy):
    with torch.no_grad():
        acts = toy(torch.randn(64000))
    assert acts.cnn_features.shape == (1, 200, 64)
    assert len(acts.layers) == toy.cfg.n_layers + 1
    assert all(layer.shape == (1, 200, 64) for layer in acts.layers)


@pytest.mark.parametrize("n", [320, 16000, 16100, 47999])
def test_frame_count_formula(toy, n):
    with torch.no_grad():
        t = toy(torch.randn(n)).n_frames
    assert t == toy.cfg.n_frames(n) == n // 320


def test_unpadded_large_frame_count_within_one():
    cfg = preset_config("large")
    assert cfg.n_frames(64000) == 199
    assert abs(cfg.n_frames(64000) - 64000 // 320) <= 1


def test_eval_deterministic(toy):
    x = torch.randn(2, 8000)
    with torch.no_grad():
        a, b = toy(x), toy(x)
    for la, lb in zip(a.layers, b.layers):
        assert torch.equal(la, lb)


def test_empty_mask_is_noop(toy):
    x = torch.randn(8000)
    empty = MaskSpec(np.array([], dtype=np.int64))
    with torch.no_grad():
        a, b = toy(x), toy(x, mask=empty)
    assert torch.equal(a.layers[-1], b.layers[-1])


def test_mask_replaces_only_masked_rows(toy):
    x = torch.randn(8000)
    mask = MaskSpec(np.array([3, 4, 10]))
    with torch.no_grad():
        cnn = toy.cnn(x)
        masked = toy.apply_mask(cnn, mask)
    keep = np.ones(cnn.shape[1], dtype=bool)
    keep[[3, 4, 10]] = False
    assert torch.equal(masked[0, keep], cnn[0, keep])
    assert torch.equal(masked[0, 3], toy.mask_emb.data)


def test_mask_out_of_range(toy):
    with pytest.raises(DataError):
        toy(torch.randn(3200), mask=MaskSpec(np.array([10])))


def test_make_mask_edge_cases():
    rng = np.random.default_rng(0)
    assert len(make_mask(50, 0.0, 10, rng)) == 0
    assert np.array_equal(make_mask(50, 1.0, 1, rng).masked_frame_indices, np.arange(50))
    with pytest.raises(DataError):
        make_mask(0, 0.5, 10, rng)


def test_make_mask_deterministic_and_coverage():
    a = make_mask(100, 0.5, 10, np.random.default_rng(7))
    b = make_mask(100, 0.5, 10, np.random.default_rng(7))
    assert np.array_equal(a.masked_frame_indices, b.masked_frame_indices)
    for seed in range(20):
        for ratio in (0.1, 0.33, 0.65):
            m = make_mask(137, ratio, 10, np.random.default_rng(seed))
            assert abs(len(m) / 137 - ratio) <= 10 / 137
            assert m.masked_frame_indices.min() >= 0 and m.masked_frame_indices.max() < 137


def test_relative_buckets_match_scalar_formula():
    def scalar(rel, nb=32, md=100):
        nb //= 2
        b = nb if rel > 0 else 0
        rel = abs(rel)
        me = nb // 2
        if rel < me:
            return b + rel
        v = me + int(np.log(rel / me) / np.log(md / me) * (nb - me))
        return b + min(v, nb - 1)

    rel = torch.arange(-300, 301)
    got = relative_position_bucket(rel, 32, 100).tolist()
    assert got == [scalar(int(r)) for r in rel]


def test_toy_preset_seeded_init():
    a, b = load_pretrained("toy", seed=3), load_pretrained("toy", seed=3)
    c = load_pretrained("toy", seed=4)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not all(torch.equal(sa[k], sc[k]) for k in sa)


def test_checkpoint_roundtrip(tmp_path, toy):
    path = str(tmp_path / "enc.pt")
    save_encoder(toy, path)
    loaded = load_pretrained(path)
    x = torch.randn(4000)
    with torch.no_grad():
        assert torch.equal(toy(x).layers[-1], loaded(x).layers[-1])


def test_truncated_checkpoint_is_architecture_error(tmp_path, toy):
    path = tmp_path / "enc.pt"
    save_encoder(toy, str(path))
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_pretrained(str(path))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(AssetError):
        load_pretrained(str(tmp_path / "nope.pt"))


def _to_reference_names(state):
    """Inverse of the translation table for a layer_norm-mode model."""
    out = {}
    for name, v in state.items():
        if name == "mask_emb":
            continue
        m = re.match(r"feature_extractor\.conv_layers\.(\d+)\.1\.(weight|bias)", name)
        if m:
            out[f"feature_extractor.conv_layers.{m[1]}.2.1.{m[2]}"] = v
        elif name.startswith("layers."):
            out["encoder." + name] = v
        elif name.startswith("final_layer_norm."):
            out["encoder.layer_norm." + name.split(".")[-1]] = v
        elif name.startswith("pos_conv.conv.parametrizations"):
            out["encoder.pos_conv.0." + ("weight_g" if name.endswith("0") else "weight_v")] = v
        elif name == "pos_conv.conv.bias":
            out["encoder.pos_conv.0.bias"] = v
        else:
            out[name] = v
    return out


def test_reference_checkpoint_translation(tmp_path):
    cfg = EncoderConfig(n_layers=2, model_dim=32, n_heads=4, ffn_dim=64, conv_dim=16,
                        pad_input=False, pos_conv_kernel=8, pos_conv_groups=4,
                        num_buckets=32, max_distance=100)
    model = build_encoder(cfg, seed=1).eval()
    ref_cfg = {
        "encoder_layers": 2, "encoder_embed_dim": 32, "encoder_attention_heads": 4,
        "encoder_ffn_embed_dim": 64,
        "conv_feature_layers": "[(16,10,5)] + [(16,3,2)] * 4 + [(16,2,2)] * 2",
        "extractor_mode": "layer_norm", "conv_bias": False, "normalize": False,
        "conv_pos": 8, "conv_pos_groups": 4, "num_buckets": 32, "max_distance": 100,
        "relative_position_embedding": True, "gru_rel_pos": True, "layer_norm_first": True,
    }
    state = _to_reference_names(model.state_dict())
    state["mask_emb"] = torch.zeros(32)
    path = str(tmp_path / "ref.pt")
    torch.save({"cfg": ref_cfg, "model": state}, path)
    loaded = load_pretrained(path)
    x = torch.randn(4000)
    with torch.no_grad():
        for a, b in zip(model(x).layers, loaded(x).layers):
            assert torch.equal(a, b)

    state["encoder.layers.0.fc1.weight"] = torch.zeros(3, 3)
    torch.save({"cfg": ref_cfg, "model": state}, path)
    with pytest.raises(CheckpointError):
        load_pretrained(path)


def test_translation_table_patterns_compile():
    for pattern, _ in CHECKPOINT_NAME_TABLE:
        re.compile(pattern)


def test_golden_verification_roundtrip(tmp_path, toy):
    probe = torch.randn(16000)
    with torch.no_grad():
        acts = toy(probe)
    path = str(tmp_path / "golden.pt")
    torch.save({"probe": probe, "layers": {i: acts.layers[i][0] for i in (1, 4)}}, path)
    assert verify_golden(toy, path) == 0.0
    torch.save({"probe": probe, "layers": {1: acts.layers[1][0] + 1e-3}}, path)
    with pytest.raises(CheckpointError):
        verify_golden(toy, path)


@pytest.mark.assets
def test_large_checkpoint_golden_match():
    try:
        ckpt = require_asset("WavLM-Large.pt")
        golden = require_asset("wavlm_large_golden.pt")
    except AssetError as e:
        pytest.skip(f"ASSET-GATED: {e}")
    assert verify_golden(load_pretrained(ckpt), golden, tol=1e-4) <= 1e-4


def test_missing_asset_message(tmp_path):
    with pytest.raises(AssetError, match="Download"):
        require_asset("WavLM-Large.pt", str(tmp_path))
