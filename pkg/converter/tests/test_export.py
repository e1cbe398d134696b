import json

import numpy as np
import pytest
import torch

from lsqw_converter import (ConvConfig, ExportError, export, make_seeded_model,
                            make_toy_model, read_reference_logits)

CFG = ConvConfig(num_encoder_layers=1, num_decoder_layers=1, d_model=16, d_ff=32,
                 num_heads=2, vocab_size=53, max_seq_len=16)


def save_checkpoint(path, config=CFG, seed=0, mutate=None):
    model = make_seeded_model(config, seed)
    state = dict(model.state_dict())
    if mutate:
        mutate(state)
    torch.save({"config": config.to_dict(), "state_dict": state}, path)
    return path


class TestDeterminism:
    def test_same_seed_twice_byte_identical(self, tmp_path):
        d1 = tmp_path / "run1"
        d2 = tmp_path / "run2"
        d1.mkdir()
        d2.mkdir()
        make_toy_model(CFG, seed=7, out_path=d1 / "toy.lsqw")
        make_toy_model(CFG, seed=7, out_path=d2 / "toy.lsqw")
        for suffix in ("", ".manifest.json", ".ref.lsqr", ".ckpt.pt"):
            assert (d1 / f"toy.lsqw{suffix}").read_bytes() == \
                   (d2 / f"toy.lsqw{suffix}").read_bytes(), suffix or "lsqw"

    def test_reference_row_count_matches_inputs(self, tmp_path):
        out = tmp_path / "t.lsqw"
        make_toy_model(CFG, seed=1, out_path=out, n_inputs=6)
        src, tgt, logits = read_reference_logits(str(out) + ".ref.lsqr")
        assert src.shape[0] == tgt.shape[0] == logits.shape[0] == 6
        assert logits.shape[2] == CFG.vocab_size


class TestManifest:
    def test_checksum_matches_written_file(self, tmp_path):
        import hashlib
        out = tmp_path / "m.lsqw"
        manifest = make_toy_model(CFG, seed=2, out_path=out)
        assert manifest.checksum == hashlib.sha256(out.read_bytes()).hexdigest()
        on_disk = json.loads((tmp_path / "m.lsqw.manifest.json").read_text())
        assert on_disk["checksum"] == manifest.checksum

    def test_every_required_tensor_mapped_once(self, tmp_path):
        out = tmp_path / "m.lsqw"
        manifest = make_toy_model(CFG, seed=3, out_path=out)
        from fuseq.model import ModelConfig, ModelWeights
        ecfg = ModelConfig(**manifest.config)
        required = set(ModelWeights.expected_shapes(ModelWeights(None, [], []), ecfg))
        assert set(manifest.mapping) == required
        assert len(set(manifest.mapping.values())) == len(manifest.mapping)

    def test_missing_tensor_fails_loudly_no_partial_file(self, tmp_path):
        ck = save_checkpoint(tmp_path / "ck.pt",
                             mutate=lambda s: s.pop("encoder.0.ff1.weight"))
        out = tmp_path / "m.lsqw"
        with pytest.raises(ExportError, match="encoder.0.ff1.weight"):
            export(ck, out)
        assert not out.exists()

    def test_unmapped_extra_tensor_rejected(self, tmp_path):
        def add_extra(state):
            state["mystery.weight"] = torch.zeros(3, 3)
        ck = save_checkpoint(tmp_path / "ck.pt", mutate=add_extra)
        with pytest.raises(ExportError, match="mystery.weight"):
            export(ck, tmp_path / "m.lsqw")

    def test_garbage_checkpoint_rejected(self, tmp_path):
        p = tmp_path / "junk.pt"
        torch.save({"weights": [1, 2, 3]}, p)
        with pytest.raises(ExportError):
            export(p, tmp_path / "m.lsqw")


class TestEngineInterop:
    def test_engine_load_config_matches_manifest(self, tmp_path):
        from fuseq.weights_io import load_weights
        out = tmp_path / "m.lsqw"
        manifest = make_toy_model(CFG, seed=4, out_path=out)
        ecfg, _ = load_weights(out)
        assert ecfg.to_dict() == manifest.config

    def test_fp16_storage_widen_narrow(self, tmp_path):
        from fuseq.weights_io import load_weights
        out16 = tmp_path / "h.lsqw"
        ck = save_checkpoint(tmp_path / "ck.pt", seed=5)
        export(ck, out16, fp16_storage=True)
        _, w16 = load_weights(out16)
        model_state = torch.load(ck, map_location="cpu", weights_only=True)["state_dict"]
        original = model_state["embed.weight"].numpy()
        assert np.array_equal(w16.token_embedding, np.float32(np.float16(original)))

    def test_projection_orientation(self, tmp_path):
        # torch Linear computes x @ W.T; the engine computes x @ w_qkv, so
        # the exported matrix must be the transpose
        from fuseq.weights_io import load_weights
        ck = save_checkpoint(tmp_path / "ck.pt", seed=6)
        out = tmp_path / "m.lsqw"
        export(ck, out)
        _, w = load_weights(out)
        state = torch.load(ck, map_location="cpu", weights_only=True)["state_dict"]
        assert np.array_equal(w.encoder[0].w_qkv,
                              state["encoder.0.qkv.weight"].numpy().T)


class TestCli:
    def test_make_toy_and_export_roundtrip(self, tmp_path, capsys):
        from lsqw_converter.cli import main
        out = tmp_path / "cli.lsqw"
        assert main(["make-toy", "--out", str(out), "--seed", "9",
                     "--d-model", "16", "--d-ff", "32", "--heads", "2",
                     "--vocab", "53", "--enc-layers", "1", "--dec-layers", "1"]) == 0
        assert out.exists()
        out2 = tmp_path / "again.lsqw"
        assert main(["export", "--checkpoint", str(out) + ".ckpt.pt",
                     "--out", str(out2)]) == 0
        assert out.read_bytes() == out2.read_bytes()

    def test_export_missing_checkpoint(self, tmp_path, capsys):
        from lsqw_converter.cli import main
        assert main(["export", "--checkpoint", str(tmp_path / "no.pt"),
                     "--out", str(tmp_path / "x.lsqw")]) == 1
