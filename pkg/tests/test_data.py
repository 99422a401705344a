"""Volume file format, manifests, PNG ingestion, and the synthetic generator."""

import json
import struct

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from seqseg.data import (
    SEGV1_HEADER_BYTES,
    Manifest,
    ManifestItem,
    SynthSpec,
    Volume,
    generate_synthetic,
    ingest_png_stack,
    read_segv1,
    resample_inplane,
    write_segv1,
)
from seqseg.errors import FormatError, ShapeError


class TestSegv1Format:
    def test_header_is_exactly_30_bytes_with_known_layout(self, tmp_path):
        arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        path = tmp_path / "v.segv1"
        write_segv1(path, arr, (1.5, 2.0, 2.5))
        blob = path.read_bytes()
        # hand-assembled header, field by field
        expected = (
            b"SGV1"
            + bytes([1, 0])
            + (2).to_bytes(4, "little")
            + (3).to_bytes(4, "little")
            + (4).to_bytes(4, "little")
            + struct.pack("<f", 1.5)
            + struct.pack("<f", 2.0)
            + struct.pack("<f", 2.5)
        )
        assert len(expected) == SEGV1_HEADER_BYTES == 30
        assert blob[:30] == expected
        assert len(blob) == 30 + 24 * 4

    def test_payload_is_w_fastest_little_endian(self, tmp_path):
        arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        path = tmp_path / "v.segv1"
        write_segv1(path, arr, (1, 1, 1))
        payload = path.read_bytes()[30:]
        # element (d=0, h=0, w=1) must be the second f32
        assert struct.unpack("<f", payload[4:8])[0] == arr[0, 0, 1]
        # element (d=1, h=0, w=0) starts one full slice in
        off = 3 * 4 * 4
        assert struct.unpack("<f", payload[off:off + 4])[0] == arr[1, 0, 0]

    def test_float32_round_trip_is_bitwise(self, tmp_path):
        rng = np.random.default_rng(11)
        arr = rng.normal(size=(3, 5, 7)).astype(np.float32)
        path = tmp_path / "v.segv1"
        write_segv1(path, arr, (0.75, 0.75, 3.0))
        back, spacing = read_segv1(path)
        assert back.dtype == np.float32
        assert back.tobytes() == arr.tobytes()
        assert spacing == (0.75, 0.75, 3.0)

    def test_uint8_round_trip_is_bitwise(self, tmp_path):
        rng = np.random.default_rng(12)
        arr = (rng.random((4, 6, 5)) > 0.5).astype(np.uint8)
        path = tmp_path / "m.segv1"
        write_segv1(path, arr, (1, 1, 1))
        back, _ = read_segv1(path)
        assert back.dtype == np.uint8
        assert back.tobytes() == arr.tobytes()

    def test_truncated_payload_rejected_with_offset(self, tmp_path):
        arr = np.zeros((2, 3, 4), np.float32)
        path = tmp_path / "v.segv1"
        write_segv1(path, arr, (1, 1, 1))
        blob = path.read_bytes()
        path.write_bytes(blob[:35])
        with pytest.raises(FormatError) as e:
            read_segv1(path)
        assert e.value.offset == 35
        assert "byte offset 35" in str(e.value)

    def test_truncated_header_rejected(self, tmp_path):
        path = tmp_path / "v.segv1"
        path.write_bytes(b"SGV1\x01\x00\x02\x00")
        with pytest.raises(FormatError) as e:
            read_segv1(path)
        assert e.value.offset == 8

    def test_trailing_bytes_rejected(self, tmp_path):
        arr = np.zeros((1, 2, 2), np.uint8)
        path = tmp_path / "m.segv1"
        write_segv1(path, arr, (1, 1, 1))
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError) as e:
            read_segv1(path)
        assert e.value.offset == 30 + 4

    def test_bad_magic_version_and_dtype_code(self, tmp_path):
        arr = np.zeros((1, 2, 2), np.float32)
        path = tmp_path / "v.segv1"
        write_segv1(path, arr, (1, 1, 1))
        blob = bytearray(path.read_bytes())

        bad = tmp_path / "bad.segv1"
        bad.write_bytes(b"XGV1" + bytes(blob[4:]))
        with pytest.raises(FormatError) as e:
            read_segv1(bad)
        assert e.value.offset == 0

        blob2 = bytearray(blob)
        blob2[4] = 9
        bad.write_bytes(bytes(blob2))
        with pytest.raises(FormatError) as e:
            read_segv1(bad)
        assert e.value.offset == 4

        blob3 = bytearray(blob)
        blob3[5] = 7
        bad.write_bytes(bytes(blob3))
        with pytest.raises(FormatError) as e:
            read_segv1(bad)
        assert e.value.offset == 5

    def test_rejects_wrong_rank_and_dtype(self, tmp_path):
        with pytest.raises(ShapeError):
            write_segv1(tmp_path / "x", np.zeros((3, 3)), (1, 1, 1))
        with pytest.raises(ShapeError):
            write_segv1(tmp_path / "x", np.zeros((1, 3, 3), np.int64), (1, 1, 1))
        with pytest.raises(ShapeError):
            write_segv1(tmp_path / "x", np.zeros((1, 3, 3), np.float32), (1, 0, 1))


class TestVolume:
    def test_validation(self):
        with pytest.raises(ShapeError):
            Volume(np.zeros((4, 4)))
        with pytest.raises(ShapeError):
            Volume(np.zeros((2, 4, 4)), mask=np.zeros((2, 4, 5)))
        with pytest.raises(ShapeError):
            Volume(np.zeros((2, 4, 4)), mask=np.full((2, 4, 4), 3))
        with pytest.raises(ShapeError):
            Volume(np.zeros((2, 4, 4)), spacing=(1.0, -1.0, 1.0))

    def test_save_load_pair(self, tmp_path):
        rng = np.random.default_rng(3)
        vol = Volume(
            rng.normal(size=(2, 8, 8)).astype(np.float32),
            (0.5, 0.5, 2.0),
            (rng.random((2, 8, 8)) > 0.6).astype(np.uint8),
        )
        vp, mp = tmp_path / "v.segv1", tmp_path / "m.segv1"
        vol.save(vp, mp)
        back = Volume.load(vp, mp)
        assert back.data.tobytes() == vol.data.tobytes()
        assert back.mask.tobytes() == vol.mask.tobytes()
        assert back.spacing == vol.spacing

    def test_load_rejects_swapped_files(self, tmp_path):
        vol = Volume(np.zeros((1, 4, 4), np.float32), mask=np.zeros((1, 4, 4), np.uint8))
        vp, mp = tmp_path / "v.segv1", tmp_path / "m.segv1"
        vol.save(vp, mp)
        with pytest.raises(FormatError):
            Volume.load(mp)
        with pytest.raises(FormatError):
            Volume.load(vp, vp)


class TestManifest:
    def test_round_trip_and_relative_resolution(self, tmp_path):
        items = [
            ManifestItem("vols/a.segv1", "vols/a_mask.segv1", "train", {0: (10, 12)}),
            ManifestItem("vols/b.segv1", None, "test", None),
        ]
        path = tmp_path / "manifest.json"
        Manifest(items).save(path)
        m = Manifest.load(path)
        assert len(m.items) == 2
        assert m.items[0].center_overrides == {0: (10, 12)}
        assert m.items[1].mask_path is None
        assert m.resolve("vols/a.segv1") == str(tmp_path / "vols" / "a.segv1")
        assert [i.volume_path for i in m.split_items("test")] == ["vols/b.segv1"]

    def test_overlapping_split_rejected(self):
        items = [
            ManifestItem("a.segv1", split="train"),
            ManifestItem("a.segv1", split="test"),
        ]
        with pytest.raises(FormatError):
            Manifest(items)

    def test_bad_split_name_rejected(self):
        with pytest.raises(FormatError):
            Manifest([ManifestItem("a.segv1", split="validate")])

    def test_malformed_json_rejected(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(FormatError):
            Manifest.load(path)
        path.write_text(json.dumps([1, 2]))
        with pytest.raises(FormatError):
            Manifest.load(path)


class TestPngIngestion:
    def test_two_slices_stack_in_lexicographic_order(self, tmp_path):
        a = np.zeros((8, 8), np.uint8)
        b = np.full((8, 8), 255, np.uint8)
        Image.fromarray(b).save(tmp_path / "slice_01.png")
        Image.fromarray(a).save(tmp_path / "slice_00.png")
        vol = ingest_png_stack(tmp_path)
        assert vol.dims == (2, 8, 8)
        assert np.all(vol.data[0] == 0.0)
        assert np.all(vol.data[1] == 1.0)

    def test_8bit_scaling(self, tmp_path):
        arr = np.array([[0, 51, 255]], np.uint8)
        Image.fromarray(arr).save(tmp_path / "s.png")
        vol = ingest_png_stack(tmp_path)
        assert np.allclose(vol.data[0], [[0.0, 51 / 255, 1.0]])

    def test_16bit_scaling(self, tmp_path):
        arr = np.array([[0, 65535]], np.uint16)
        Image.fromarray(arr).save(tmp_path / "s.png")
        vol = ingest_png_stack(tmp_path)
        assert vol.data[0, 0, 0] == 0.0
        assert vol.data[0, 0, 1] == 1.0

    def test_size_mismatch_rejected(self, tmp_path):
        Image.fromarray(np.zeros((8, 8), np.uint8)).save(tmp_path / "a.png")
        Image.fromarray(np.zeros((8, 9), np.uint8)).save(tmp_path / "b.png")
        with pytest.raises(FormatError):
            ingest_png_stack(tmp_path)

    def test_empty_directory_rejected(self, tmp_path):
        with pytest.raises(FormatError):
            ingest_png_stack(tmp_path)

    def test_rgb_rejected(self, tmp_path):
        Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "c.png")
        with pytest.raises(FormatError):
            ingest_png_stack(tmp_path)


class TestSyntheticGenerator:
    def test_degenerate_spec_gives_exact_step_image(self):
        spec = SynthSpec(
            boundary_blur_sigma=0.0, noise_sigma=0.0, contrast=1.0,
            distractors=0, seed=5,
        )
        vol = generate_synthetic(spec, 3)
        for s in range(3):
            fg = vol.mask[s].astype(bool)
            assert fg.any()
            assert np.all(vol.data[s][fg] == np.float32(0.15 + 1.0))
            assert np.all(vol.data[s][~fg] == np.float32(0.15))
            # thresholding the image recovers the mask exactly
            assert np.array_equal((vol.data[s] > 0.65).astype(np.uint8), vol.mask[s])

    def test_same_seed_is_bitwise_identical(self):
        spec = SynthSpec(seed=42)
        a = generate_synthetic(spec, 4)
        b = generate_synthetic(spec, 4)
        assert a.data.tobytes() == b.data.tobytes()
        assert a.mask.tobytes() == b.mask.tobytes()

    def test_different_seeds_differ(self):
        a = generate_synthetic(SynthSpec(seed=1), 2)
        b = generate_synthetic(SynthSpec(seed=2), 2)
        assert a.data.tobytes() != b.data.tobytes()

    def test_disk_mask_geometry(self):
        spec = SynthSpec(kind="disk", seed=9, distractors=0)
        vol = generate_synthetic(spec, 6)
        lo, hi = spec.radius_range
        mid = spec.image_size / 2.0
        for s in range(6):
            area = int(vol.mask[s].sum())
            # pixelized disk area brackets pi r^2 loosely
            assert np.pi * (lo - 1) ** 2 <= area <= np.pi * (hi + 1) ** 2
            ys, xs = np.nonzero(vol.mask[s])
            cx, cy = xs.mean(), ys.mean()
            assert abs(cx - mid) <= spec.center_jitter + 1.0
            assert abs(cy - mid) <= spec.center_jitter + 1.0

    @pytest.mark.parametrize("kind", ["disk", "ellipse", "blob"])
    def test_target_is_single_connected_component(self, kind):
        vol = generate_synthetic(SynthSpec(kind=kind, seed=17), 5)
        for s in range(5):
            _, count = ndimage.label(vol.mask[s])
            assert count == 1

    def test_blur_ladder_reduces_total_variation(self):
        """Stronger boundary blur must strictly soften the image.

        Same seed at every sigma, so the geometry is identical and total
        variation isolates the blur effect.
        """
        tvs = []
        for sigma in (0.0, 0.8, 1.6, 3.2):
            spec = SynthSpec(
                boundary_blur_sigma=sigma, noise_sigma=0.0, distractors=0, seed=3,
            )
            img = generate_synthetic(spec, 1).data[0].astype(np.float64)
            tv = np.abs(np.diff(img, axis=0)).sum() + np.abs(np.diff(img, axis=1)).sum()
            tvs.append(tv)
        assert all(tvs[i] > tvs[i + 1] for i in range(len(tvs) - 1))

    def test_distractors_are_dimmer_and_disjoint_from_target(self):
        spec = SynthSpec(noise_sigma=0.0, boundary_blur_sigma=0.0, seed=21, distractors=2)
        vol = generate_synthetic(spec, 4)
        for s in range(4):
            img, fg = vol.data[s], vol.mask[s].astype(bool)
            # target pixels hold the full contrast step
            assert np.all(img[fg] >= np.float32(0.15 + spec.contrast - 1e-6))
            bg = img[~fg]
            bright_bg = bg[bg > 0.2]
            if bright_bg.size:
                # distractor pixels never reach target brightness
                assert bright_bg.max() <= 0.15 + 0.4 * spec.contrast + 1e-6

    def test_noise_changes_background_statistics(self):
        clean = generate_synthetic(
            SynthSpec(noise_sigma=0.0, distractors=0, seed=4), 1
        ).data[0]
        noisy = generate_synthetic(
            SynthSpec(noise_sigma=0.04, distractors=0, seed=4), 1
        ).data[0]
        corner = (slice(0, 16), slice(0, 16))
        assert clean[corner].std() < 1e-6
        assert 0.02 < noisy[corner].std() < 0.08

    def test_invalid_specs_rejected(self):
        with pytest.raises(ShapeError):
            SynthSpec(kind="square")
        with pytest.raises(ShapeError):
            SynthSpec(radius_range=(30, 20))
        with pytest.raises(ShapeError):
            SynthSpec(radius_range=(15, 60), center_jitter=8)
        with pytest.raises(ShapeError):
            SynthSpec(contrast=0.0)
        with pytest.raises(ShapeError):
            SynthSpec(distractors=-1)


class TestResampleInplane:
    def test_constant_image_stays_constant(self):
        vol = Volume(np.full((2, 6, 6), 0.3, np.float32), (1.0, 1.0, 2.0))
        out = resample_inplane(vol, 0.5)
        assert out.dims == (2, 12, 12)
        assert out.spacing == (0.5, 0.5, 2.0)
        assert np.allclose(out.data, 0.3, atol=1e-7)

    def test_linear_ramp_interpolates_exactly_in_interior(self):
        w = 8
        ramp = np.tile(np.arange(w, dtype=np.float32), (w, 1))[None]
        vol = Volume(ramp, (1.0, 1.0, 1.0))
        out = resample_inplane(vol, 0.5)
        nw = out.data.shape[2]
        xs = (np.arange(nw) + 0.5) * (w / nw) - 0.5
        interior = (xs > 0) & (xs < w - 1)
        # bilinear interpolation reproduces a linear function exactly
        assert np.allclose(out.data[0, 4, interior], xs[interior], atol=1e-6)

    def test_mask_stays_binary_under_nearest_neighbor(self):
        rng = np.random.default_rng(8)
        mask = (rng.random((1, 10, 10)) > 0.5).astype(np.uint8)
        vol = Volume(rng.random((1, 10, 10)).astype(np.float32), (1, 1, 1), mask)
        out = resample_inplane(vol, 0.7)
        assert set(np.unique(out.mask)) <= {0, 1}
        # nearest neighbor at identical grid positions preserves values
        same = resample_inplane(vol, 1.0)
        assert np.array_equal(same.mask, mask)

    def test_identity_resample_copies(self):
        vol = Volume(np.random.default_rng(1).random((1, 5, 5)).astype(np.float32))
        out = resample_inplane(vol, 1.0)
        assert out.data.tobytes() == vol.data.tobytes()
        assert out.data is not vol.data

    def test_invalid_target_rejected(self):
        vol = Volume(np.zeros((1, 4, 4), np.float32))
        with pytest.raises(ShapeError):
            resample_inplane(vol, 0.0)
