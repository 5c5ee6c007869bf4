import numpy as np
import pytest
import torch
from PIL import Image
from scipy import ndimage

from hifi_bbrg.data import (
    DatasetError,
    PairedDataset,
    SyntheticTaskSpec,
    UnmatchedFilesError,
    corrupt,
    denormalize,
    generate_synthetic_pairs,
    load_paired_folder,
    normalize,
    split,
    write_paired_folder,
)

SMALL = dict(size=16, n_samples=6, seed=3)


class TestSynthetic:
    @pytest.mark.parametrize("kind", ["blur-deblur", "edge-to-fill", "bias-field"])
    def test_reproducible_and_in_range(self, kind):
        spec = SyntheticTaskSpec(kind=kind, **SMALL)
        a, b = generate_synthetic_pairs(spec), generate_synthetic_pairs(spec)
        assert a.digest() == b.digest()
        for x in (a.source, a.target):
            assert torch.isfinite(x).all() and float(x.abs().max()) <= 1.0

    @pytest.mark.parametrize("kind", ["blur-deblur", "edge-to-fill", "bias-field"])
    def test_dataset_carries_its_oracle(self, kind):
        spec = SyntheticTaskSpec(kind=kind, **SMALL)
        ds = generate_synthetic_pairs(spec)
        for i, seed in enumerate(ds.provenance["sample_seeds"]):
            again = corrupt(ds.target[i].numpy(), spec, seed)
            assert np.array_equal(again, ds.source[i].numpy())

    def test_zero_sigma_is_identity(self):
        ds = generate_synthetic_pairs(SyntheticTaskSpec(blur_sigma=0.0, **SMALL))
        assert torch.equal(ds.source, ds.target)

    def test_blur_matches_scipy(self):
        spec = SyntheticTaskSpec(kind="blur-deblur", size=32, n_samples=4, seed=0, blur_sigma=2.0)
        ds = generate_synthetic_pairs(spec)
        ref = np.stack([
            ndimage.gaussian_filter(t.numpy().astype(np.float64), sigma=(0, 2.0, 2.0), mode="reflect", truncate=4.0)
            for t in ds.target
        ]).astype(np.float32)
        np.testing.assert_allclose(ds.source.numpy(), ref, atol=2e-6)
        mad_ref = float(np.abs(ref - ds.target.numpy()).mean())
        mad = float((ds.source - ds.target).abs().mean())
        assert mad > 0.0
        assert mad == pytest.approx(mad_ref, rel=1e-4)

    def test_seed_changes_data(self):
        a = generate_synthetic_pairs(SyntheticTaskSpec(**SMALL))
        b = generate_synthetic_pairs(SyntheticTaskSpec(**(SMALL | {"seed": 4})))
        assert a.digest() != b.digest()

    @pytest.mark.parametrize("bad", [dict(n_samples=0), dict(kind="denoise"), dict(blur_sigma=-1.0)])
    def test_invalid_spec(self, bad):
        with pytest.raises(DatasetError):
            SyntheticTaskSpec(**bad)


class TestNormalize:
    def test_values(self):
        assert normalize(127.5, 0, 255) == 0.0
        assert normalize(255.0, 0, 255) == 1.0
        assert normalize(0.0, 0, 255) == -1.0
        assert normalize(64.0, 0, 255) == pytest.approx(-0.498039, abs=1e-6)

    def test_round_trip(self):
        x = torch.rand(4, 1, 8, 8, generator=torch.Generator().manual_seed(0)) * 255
        back = denormalize(normalize(x, 0.0, 255.0), 0.0, 255.0)
        assert float((back - x).abs().max()) / 255.0 <= 1e-6

    def test_bad_range(self):
        with pytest.raises(ValueError):
            normalize(1.0, 2.0, 2.0)


def _write_gray(path, value, size=8, mode="L"):
    if mode == "L":
        Image.fromarray(np.full((size, size), value, dtype=np.uint8)).save(path)
    else:
        Image.fromarray(np.full((size, size), value, dtype=np.uint16)).save(path)


class TestFolders:
    def test_pairs_in_lexicographic_order(self, tmp_path):
        for sub in ("A", "B"):
            (tmp_path / sub).mkdir()
            _write_gray(tmp_path / sub / "2.png", 0)
            _write_gray(tmp_path / sub / "1.png", 255)
        ds = load_paired_folder(tmp_path / "A", tmp_path / "B", size=8)
        assert ds.names == ["1.png", "2.png"]
        assert float(ds.source[0].min()) == 1.0
        assert float(ds.source[1].max()) == -1.0

    def test_unmatched_file_named(self, tmp_path):
        for sub in ("A", "B"):
            (tmp_path / sub).mkdir()
            _write_gray(tmp_path / sub / "1.png", 10)
        _write_gray(tmp_path / "A" / "2.png", 10)
        with pytest.raises(UnmatchedFilesError, match="2.png"):
            load_paired_folder(tmp_path / "A", tmp_path / "B", size=8)

    def test_sixteen_bit_and_resize(self, tmp_path):
        for sub in ("A", "B"):
            (tmp_path / sub).mkdir()
            _write_gray(tmp_path / sub / "x.png", 65535, size=12, mode="I;16")
        ds = load_paired_folder(tmp_path / "A", tmp_path / "B", size=8)
        assert ds.source.shape == (1, 1, 8, 8)
        assert torch.allclose(ds.source, torch.ones_like(ds.source))

    def test_rgb(self, tmp_path):
        for sub in ("A", "B"):
            (tmp_path / sub).mkdir()
            Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(tmp_path / sub / "c.png")
        assert load_paired_folder(tmp_path / "A", tmp_path / "B", 8).channels == 3

    def test_inconsistent_channels(self, tmp_path):
        for sub in ("A", "B"):
            (tmp_path / sub).mkdir()
        _write_gray(tmp_path / "A" / "c.png", 0)
        Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(tmp_path / "B" / "c.png")
        with pytest.raises(DatasetError, match="channels"):
            load_paired_folder(tmp_path / "A", tmp_path / "B", 8)

    def test_corrupt_file(self, tmp_path):
        for sub in ("A", "B"):
            (tmp_path / sub).mkdir()
            (tmp_path / sub / "bad.png").write_bytes(b"not a png")
        with pytest.raises(DatasetError, match="decode"):
            load_paired_folder(tmp_path / "A", tmp_path / "B", 8)

    def test_missing_folder(self, tmp_path):
        with pytest.raises(DatasetError):
            load_paired_folder(tmp_path / "nope", tmp_path / "nope", 8)

    def test_export_and_reload(self, tmp_path):
        ds = generate_synthetic_pairs(SyntheticTaskSpec(**SMALL))
        out = write_paired_folder(ds, tmp_path / "export", raw=True)
        again = load_paired_folder(out / "A", out / "B", size=16)
        assert again.names == ds.names
        # 8-bit quantisation error is at most half a grey level.
        assert float((again.source - ds.source).abs().max()) <= 1.0 / 255 + 1e-6
        assert load_paired_folder(out / "A", out / "B", 16).digest() == again.digest()


class TestSplit:
    def test_disjoint_exhaustive_stable(self):
        ds = generate_synthetic_pairs(SyntheticTaskSpec(**(SMALL | {"n_samples": 20})))
        tr, va, te = split(ds, (0.6, 0.2, 0.2), seed=1)
        names = [set(p.names) for p in (tr, va, te)]
        assert not (names[0] & names[1] or names[0] & names[2] or names[1] & names[2])
        assert set().union(*names) == set(ds.names)
        assert (len(tr), len(va), len(te)) == (12, 4, 4)
        tr2, _, _ = split(ds, (0.6, 0.2, 0.2), seed=1)
        assert tr2.names == tr.names

    def test_bad_fractions(self):
        ds = generate_synthetic_pairs(SyntheticTaskSpec(**SMALL))
        with pytest.raises(DatasetError):
            split(ds, (0.5, 0.5, 0.5), seed=0)


def test_dataset_rejects_out_of_range():
    x = torch.full((1, 1, 2, 2), 1.5)
    with pytest.raises(DatasetError):
        PairedDataset(x, x, ["a"])
