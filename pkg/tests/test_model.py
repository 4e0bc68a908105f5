"""Model assembly, forward stage gating, freezing, and the checkpoint format."""

import json
import struct

import numpy as np
import pytest

from anticipate.errors import ConfigError, ContractError, DataError, FormatError, ShapeError
from anticipate.model import (
    CHECKPOINT_MAGIC,
    AnticipationModel,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
)
from anticipate.rngstream import rng_stream
from anticipate.text import hash_bag, tokenize


def small_config(**over):
    base = dict(
        dim=16, heads=2, fuser_depth=1, decoder_depth=1, contrast_dim=8,
        n_fuse=1, frames=4, classes=5, hash_buckets=64,
        modality_dims={"rgb": 6, "flow": 4}, text_modalities=("act_text",),
    )
    base.update(over)
    return ModelConfig(**base)


def small_model(seed=0, **over):
    return AnticipationModel(small_config(**over), rng_stream(seed))


def dense_features(g, b=2, t=4):
    return {
        "rgb": g.normal(size=(b, t, 6)).astype(np.float32),
        "flow": g.normal(size=(b, t, 4)).astype(np.float32),
    }


def bag(g, b=2, t=4, slots=3, buckets=64):
    ids = g.integers(0, buckets, size=(b, t, slots)).astype(np.int64)
    w = g.normal(size=(b, t, slots)).astype(np.float32)
    w /= np.maximum(np.linalg.norm(w, axis=-1, keepdims=True), 1e-6)
    return ids, w


class TestModelConfig:
    def test_round_trip(self):
        cfg = small_config()
        again = ModelConfig.from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()

    def test_unknown_key_rejected(self):
        raw = small_config().to_dict()
        raw["dropout"] = 0.1
        with pytest.raises(ConfigError, match="dropout"):
            ModelConfig.from_dict(raw)

    def test_unknown_modality_rejected(self):
        with pytest.raises(ConfigError):
            small_config(modality_dims={"depth": 8})

    def test_dense_text_overlap_rejected(self):
        with pytest.raises(ConfigError):
            small_config(modality_dims={"rgb": 6, "act_text": 4})

    def test_bad_anchor_rejected(self):
        with pytest.raises(ConfigError):
            small_config(contrast_anchor="both")

    def test_canonical_modality_order(self):
        cfg = small_config(modality_dims={"obj_feat": 4, "rgb": 6})
        assert cfg.modalities() == ("rgb", "obj_feat", "act_text")


class TestForward:
    def test_pretrain_outputs(self):
        net = small_model(1)
        g = np.random.default_rng(2)
        feats = dense_features(g)
        feats["act_text"] = bag(g)
        out = net.forward(feats, "pretrain")
        assert "video" in out and "logits" not in out
        assert out["video"].shape == (2, 8)
        norms = np.linalg.norm(out["video"].data, axis=-1)
        assert np.allclose(norms, 1.0, atol=1e-5)

    def test_finetune_outputs(self):
        net = small_model(3)
        out = net.forward(dense_features(np.random.default_rng(4)), "finetune")
        assert "logits" in out and "video" not in out
        assert out["logits"].shape == (2, 5)

    def test_unknown_stage(self):
        net = small_model(5)
        with pytest.raises(ContractError):
            net.forward(dense_features(np.random.default_rng(6)), "test")

    def test_unregistered_modality(self):
        net = small_model(7)
        feats = {"audio": np.zeros((1, 4, 16), np.float32)}
        with pytest.raises(ConfigError):
            net.project(feats)

    def test_wrong_native_dim(self):
        net = small_model(8)
        with pytest.raises(ShapeError, match="rgb"):
            net.project({"rgb": np.zeros((1, 4, 7), np.float32)})

    def test_anchor_selects_stream(self):
        g = np.random.default_rng(9)
        feats = dense_features(g)
        ant = small_model(10, contrast_anchor="anticipated")
        state = ant.encode(feats)
        assert np.array_equal(ant.contrast_anchor(state).data, state.anticipated.data[:, -1])
        fus = small_model(10, contrast_anchor="fused")
        state2 = fus.encode(feats)
        assert np.array_equal(fus.contrast_anchor(state2).data, state2.fused.data[:, -1])

    def test_text_embed_unit_norm(self):
        net = small_model(11)
        ids, w = bag(np.random.default_rng(12), b=3, t=1)
        emb = net.text_embed(ids[:, 0], w[:, 0])
        assert emb.shape == (3, 8)
        assert np.allclose(np.linalg.norm(emb.data, axis=-1), 1.0, atol=1e-5)

    def test_disjoint_text_cosine_survives_normalization(self):
        # projection bias starts at zero, so normalizing cannot move the
        # angle between two freshly projected descriptions
        net = small_model(13, hash_buckets=4096)
        assert not net.text_head.bias.data.any()
        ids1, w1 = hash_bag(tokenize("wipe the counter slowly"), 4096)
        ids2, w2 = hash_bag(tokenize("grab another mug now"), 4096)
        assert not set(ids1.tolist()) & set(ids2.tolist())

        def cos(a, b):
            a, b = a.reshape(-1), b.reshape(-1)
            return float(a @ b) / float(np.linalg.norm(a) * np.linalg.norm(b))

        raw = cos(net.text_head(ids1[None], w1[None]).data,
                  net.text_head(ids2[None], w2[None]).data)
        emb = cos(net.text_embed(ids1[None], w1[None]).data,
                  net.text_embed(ids2[None], w2[None]).data)
        assert np.isfinite(emb)
        assert emb == pytest.approx(raw, abs=1e-6)


class TestFreezing:
    def test_frozen_limits_trainables(self):
        net = small_model(20)
        net.set_frozen(True)
        head = net.classifier_param_ids()
        for name, p in net.named_params():
            assert p.requires_grad == (id(p) in head), name
        net.set_frozen(False)
        assert all(p.requires_grad for _, p in net.named_params())

    def test_snapshot_restore(self):
        net = small_model(21)
        snap = net.snapshot()
        for _, p in net.named_params():
            p.data += 1.0
        net.restore(snap)
        for name, p in net.named_params():
            assert np.array_equal(p.data, snap[name]), name


class TestCheckpoint:
    def test_bitwise_round_trip(self, tmp_path):
        net = small_model(30)
        path = tmp_path / "m.ckpt"
        save_checkpoint(net, path)
        loaded = load_checkpoint(path)
        assert loaded.config.to_dict() == net.config.to_dict()
        orig = dict(net.named_params())
        for name, p in loaded.named_params():
            assert np.array_equal(p.data, orig[name].data), name

    def test_save_load_save_identical_bytes(self, tmp_path):
        net = small_model(31)
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(net, a)
        save_checkpoint(load_checkpoint(a), b)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(small_model(32), path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(small_model(33), path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 16])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(small_model(34), path)
        path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
        with pytest.raises(FormatError, match="trailing"):
            load_checkpoint(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(small_model(35), path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(path)

    def _rewrite_header(self, path, mutate):
        blob = path.read_bytes()
        header_len = struct.unpack("<I", blob[8:12])[0]
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
        mutate(header)
        out = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        path.write_bytes(
            blob[:4] + blob[4:8] + struct.pack("<I", len(out)) + out + blob[12 + header_len :]
        )

    def test_manifest_name_mismatch_names_tensors(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(small_model(36), path)

        def rename(header):
            header["manifest"][0]["name"] = "bogus_tensor"

        self._rewrite_header(path, rename)
        with pytest.raises(DataError, match="bogus_tensor"):
            load_checkpoint(path)

    def test_manifest_shape_mismatch_names_tensor(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(small_model(37), path)

        def reshape(header):
            header["manifest"][0]["shape"] = [1, 1]

        self._rewrite_header(path, reshape)
        with pytest.raises(DataError, match="shape"):
            load_checkpoint(path)

    def test_magic_constant(self):
        assert CHECKPOINT_MAGIC == b"ANTC"
