import numpy as np
import pytest

from tokenprune.archive import load_model_archive, params_checksum, save_model_archive
from tokenprune.encoder import EncoderParams, ModelConfig
from tokenprune.errors import DataError
from tokenprune.flopsmodel import LagrangeState
from tokenprune.masks import MaskSet
from tokenprune.rng import Rng


@pytest.fixture
def bundle_parts():
    cfg = ModelConfig(num_layers=2, hidden=8, ffn_inner=16, heads=2, vocab_size=12, max_len=6, num_classes=2)
    params = EncoderParams.init(cfg, Rng(31))
    masks = MaskSet(2, 6)
    masks.gate[0].data[...] = 1.234567890123456789
    masks.rank[1].data[3] = -0.1 / 3.0
    lagrange = LagrangeState(0.125, 1e-17)
    return params, masks, lagrange


class TestArchiveRoundtrip:
    def test_bit_exact_parameters(self, tmp_path, bundle_parts):
        params, masks, lagrange = bundle_parts
        path = str(tmp_path / "model.json")
        save_model_archive(path, params, masks=masks, lagrange=lagrange, metadata={"role": "test"})
        loaded = load_model_archive(path)
        for (n1, p1), (n2, p2) in zip(params.named(), loaded.params.named()):
            assert n1 == n2
            np.testing.assert_array_equal(p1.data, p2.data)
        for (n1, m1), (n2, m2) in zip(masks.named(), loaded.masks.named()):
            assert n1 == n2
            np.testing.assert_array_equal(m1.data, m2.data)
        assert loaded.lagrange.lambda1.item() == 0.125
        assert loaded.lagrange.lambda2.item() == 1e-17
        assert loaded.metadata["role"] == "test"

    def test_save_load_save_is_byte_identical(self, tmp_path, bundle_parts):
        params, masks, lagrange = bundle_parts
        p1 = tmp_path / "a.json"
        p2 = tmp_path / "b.json"
        save_model_archive(str(p1), params, masks=masks, lagrange=lagrange)
        loaded = load_model_archive(str(p1))
        save_model_archive(str(p2), loaded.params, masks=loaded.masks, lagrange=loaded.lagrange)
        assert p1.read_bytes() == p2.read_bytes()

    def test_checksum_detects_tampering(self, tmp_path, bundle_parts):
        params, _, _ = bundle_parts
        path = tmp_path / "model.json"
        save_model_archive(str(path), params)
        text = path.read_text()
        # flip one digit inside the parameter payload
        idx = text.index('"tok_emb"')
        broken = text[: idx + 30] + ("1" if text[idx + 30] != "1" else "2") + text[idx + 31 :]
        path.write_text(broken)
        with pytest.raises((DataError, ValueError)):
            load_model_archive(str(path))

    def test_checksum_is_content_addressed(self, bundle_parts):
        params, _, _ = bundle_parts
        c1 = params_checksum(params)
        params["head"].data[0, 0] = np.nextafter(params["head"].data[0, 0], np.inf)
        assert params_checksum(params) != c1

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format_version": 99}')
        with pytest.raises(DataError):
            load_model_archive(str(path))
