"""Model construction, forward contracts, freezing, prediction, checkpoints."""

from __future__ import annotations

import json

import numpy as np
import pytest
import torch

from brainseg.errors import IncompatibleCheckpoint, MissingKeys
from brainseg.model import (
    NUM_CLASSES,
    VARIANTS,
    PromptSpec,
    SegModel,
    SegNet,
    VariantConfig,
    build_model,
    forward,
    init_tiny,
    load_pretrained,
    logits_to_prediction,
    predict,
    save_checkpoint,
    softmax_probs,
)


def _random_image(seed=0, size=256):
    return np.random.default_rng(seed).random((size, size)).astype(np.float32)


def test_init_tiny_deterministic():
    a = init_tiny(11)
    b = init_tiny(11)
    c = init_tiny(12)
    sa, sb, sc = a.net.state_dict(), b.net.state_dict(), c.net.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert any(not torch.equal(sa[k], sc[k]) for k in sa)


def test_forward_shape_and_finiteness():
    m = init_tiny(0)
    logits = forward(m, _random_image())
    assert logits.shape == (3, 256, 256)
    assert np.isfinite(logits).all()


def test_forward_zero_image_reproducible():
    m = init_tiny(5)
    a = forward(m, np.zeros((256, 256), dtype=np.float32))
    b = forward(init_tiny(5), np.zeros((256, 256), dtype=np.float32))
    assert np.array_equal(a, b)


def test_forward_rejects_out_of_range_image():
    m = init_tiny(0)
    with pytest.raises(ValueError):
        forward(m, np.full((256, 256), 1.5, dtype=np.float32))


def test_prompt_path_is_live():
    m = init_tiny(3)
    img = _random_image(1)
    a = forward(m, img, PromptSpec((0.0, 0.0, 1.0, 1.0)))
    b = forward(m, img, PromptSpec((0.25, 0.25, 0.75, 0.75)))
    assert not np.array_equal(a, b)


def test_encoder_marked_frozen():
    m = init_tiny(0)
    assert m.encoder_frozen
    assert all(not p.requires_grad for p in m.encoder_parameters())
    assert any(p.requires_grad for p in m.trainable_parameters())


def test_gradient_step_leaves_encoder_unchanged():
    m = init_tiny(2)
    before = {k: v.clone() for k, v in m.net.image_encoder.state_dict().items()}
    opt = torch.optim.AdamW(m.trainable_parameters(), lr=1e-2)
    img = torch.rand(2, 1, 256, 256, generator=torch.Generator().manual_seed(0))
    boxes = torch.tensor([[0.0, 0.0, 1.0, 1.0]] * 2)
    loss = m.net(img, boxes).square().mean()
    loss.backward()
    opt.step()
    after = m.net.image_encoder.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_decoder_head_has_three_channels():
    for variant in ("tiny",):
        m = build_model(variant, 0)
        assert m.net.mask_decoder.class_head.out_channels == NUM_CLASSES


def _tiny_encoder_param_formula(cfg: VariantConfig) -> int:
    """Independent count: patch conv + pos embed + blocks + neck."""
    d, g = cfg.embed_dim, cfg.grid
    patch = d * 3 * cfg.patch * cfg.patch + d
    pos = g * g * d
    hidden = int(d * cfg.mlp_ratio)
    attn = 3 * d * d + 3 * d + d * d + d  # in-proj + out-proj
    mlp = d * hidden + hidden + hidden * d + d
    block = 2 * (2 * d) + attn + mlp  # two LayerNorms
    c = cfg.emb_channels
    neck = d * c + 2 * c + c * c * 9 + 2 * c
    return patch + pos + cfg.depth * block + neck


def test_encoder_parameter_count_matches_formula():
    m = init_tiny(0)
    counted = sum(p.numel() for p in m.encoder_parameters())
    assert counted == _tiny_encoder_param_formula(VARIANTS["tiny"])


def test_custom_native_resolution_bridge():
    # encoder with a different native size still yields 3x256x256 logits
    cfg = VariantConfig(
        name="custom", native_res=64, patch=8, embed_dim=32, depth=1, heads=2,
        mlp_ratio=2.0, emb_channels=32, decoder_depth=1, decoder_heads=2,
    )
    with torch.random.fork_rng():
        torch.manual_seed(0)
        m = SegModel(SegNet(cfg), "custom")
    logits = forward(m, _random_image())
    assert logits.shape == (3, 256, 256)
    assert np.isfinite(logits).all()


# --- prediction ---

def test_predict_probabilities_sum_to_one():
    m = init_tiny(0)
    label, probs = predict(m, _random_image(2))
    assert probs.shape == (3, 256, 256)
    assert np.abs(probs.sum(axis=0) - 1.0).max() <= 1e-6
    assert np.array_equal(label, np.argmax(probs, axis=0))


def test_argmax_examples_and_tie_break():
    logits = np.zeros((3, 1, 2), dtype=np.float32)
    logits[:, 0, 0] = (5.0, 1.0, 1.0)
    logits[:, 0, 1] = (1.0, 1.0, 1.0)
    label, probs = logits_to_prediction(logits)
    assert label[0, 0] == 0
    assert label[0, 1] == 0  # lowest index wins ties
    assert np.allclose(probs[:, 0, 1], 1.0 / 3.0)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(3, 16, 16)).astype(np.float32)
    shifted = logits + 7.5
    assert np.abs(softmax_probs(logits) - softmax_probs(shifted)).max() <= 1e-6
    la, _ = logits_to_prediction(logits)
    lb, _ = logits_to_prediction(shifted)
    assert np.array_equal(la, lb)


def test_prompt_spec_validation():
    PromptSpec((0.0, 0.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        PromptSpec((0.5, 0.0, 0.5, 1.0))
    with pytest.raises(ValueError):
        PromptSpec((0.0, 0.8, 1.0, 0.2))
    with pytest.raises(ValueError):
        PromptSpec((-0.1, 0.0, 1.0, 1.0))


# --- checkpoints ---

def test_checkpoint_round_trip(tmp_path):
    m = init_tiny(9)
    img = _random_image(4)
    ref = forward(m, img)
    path = tmp_path / "ck.pt"
    save_checkpoint(m, path, extra_meta={"note": "test"})
    loaded = load_pretrained(path)
    assert loaded.variant == "tiny"
    assert loaded.encoder_frozen
    assert np.array_equal(forward(loaded, img), ref)
    meta = json.loads((tmp_path / "ck.pt.json").read_text())
    assert meta["head_channels"] == 3
    assert meta["format_version"] == 1


def test_load_twice_identical(tmp_path):
    m = init_tiny(9)
    path = tmp_path / "ck.pt"
    save_checkpoint(m, path)
    img = _random_image(5)
    a = forward(load_pretrained(path), img)
    b = forward(load_pretrained(path), img)
    assert np.array_equal(a, b)


def test_truncated_checkpoint(tmp_path):
    m = init_tiny(0)
    path = tmp_path / "ck.pt"
    save_checkpoint(m, path)
    whole = path.read_bytes()
    path.write_bytes(whole[: len(whole) // 2])
    with pytest.raises(IncompatibleCheckpoint):
        load_pretrained(path)


def test_missing_sidecar(tmp_path):
    m = init_tiny(0)
    path = tmp_path / "ck.pt"
    save_checkpoint(m, path)
    (tmp_path / "ck.pt.json").unlink()
    with pytest.raises(IncompatibleCheckpoint):
        load_pretrained(path)


def test_head_keys_expected_missing(tmp_path):
    # a checkpoint converted from a binary-head decoder lacks the class head
    m = init_tiny(9)
    state = m.net.state_dict()
    state = {k: v for k, v in state.items() if not k.startswith("mask_decoder.class_head.")}
    path = tmp_path / "ck.pt"
    torch.save(state, path)
    meta = {"format_version": 1, "variant": "tiny", "head_channels": 3, "native_res": 256}
    (tmp_path / "ck.pt.json").write_text(json.dumps(meta))
    a = load_pretrained(path)
    b = load_pretrained(path)
    img = _random_image(6)
    assert np.array_equal(forward(a, img), forward(b, img))  # head init is deterministic


def test_missing_encoder_keys_rejected(tmp_path):
    m = init_tiny(9)
    state = {k: v for k, v in m.net.state_dict().items() if "image_encoder" not in k}
    path = tmp_path / "ck.pt"
    torch.save(state, path)
    meta = {"format_version": 1, "variant": "tiny", "head_channels": 3, "native_res": 256}
    (tmp_path / "ck.pt.json").write_text(json.dumps(meta))
    with pytest.raises(MissingKeys):
        load_pretrained(path)


def test_unexpected_keys_rejected(tmp_path):
    m = init_tiny(9)
    state = dict(m.net.state_dict())
    state["rogue.weight"] = torch.zeros(3)
    path = tmp_path / "ck.pt"
    torch.save(state, path)
    meta = {"format_version": 1, "variant": "tiny", "head_channels": 3, "native_res": 256}
    (tmp_path / "ck.pt.json").write_text(json.dumps(meta))
    with pytest.raises(IncompatibleCheckpoint):
        load_pretrained(path)


def test_unknown_variant_rejected(tmp_path):
    m = init_tiny(9)
    path = tmp_path / "ck.pt"
    save_checkpoint(m, path)
    meta = json.loads((tmp_path / "ck.pt.json").read_text())
    meta["variant"] = "colossal"
    (tmp_path / "ck.pt.json").write_text(json.dumps(meta))
    with pytest.raises(IncompatibleCheckpoint):
        load_pretrained(path)
