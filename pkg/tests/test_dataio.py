import numpy as np
import pytest

from fuseseg import dataio
from fuseseg.dataio import (IGNORE, DataError, SplitSpec, SyntheticSceneParams,
                            load_bundle, load_bundles, load_sequence, load_splits,
                            make_splits, read_point_records, save_sequence,
                            save_splits, synthesize_frame, write_point_records)


def synth_bundles(n, seed=0, night=False, **kw):
    params = SyntheticSceneParams(seed=seed, night=night, **kw)
    return [synthesize_frame(params, i) for i in range(n)]


class TestSynthesizeFrame:
    def test_deterministic(self):
        p = SyntheticSceneParams(seed=5)
        a, b = synthesize_frame(p, 3), synthesize_frame(p, 3)
        for key in ("rgb", "thermal", "lidar", "labels"):
            assert np.array_equal(getattr(a, key), getattr(b, key))

    def test_frames_differ(self):
        p = SyntheticSceneParams(seed=5)
        a, b = synthesize_frame(p, 0), synthesize_frame(p, 1)
        assert not np.array_equal(a.labels, b.labels)

    def test_night_flag_touches_only_rgb(self):
        day = synthesize_frame(SyntheticSceneParams(seed=9), 2)
        night = synthesize_frame(SyntheticSceneParams(seed=9, night=True), 2)
        assert np.array_equal(day.thermal, night.thermal)
        assert np.array_equal(day.lidar, night.lidar)
        assert np.array_equal(day.labels, night.labels)
        assert not np.array_equal(day.rgb, night.rgb)

    def test_unit_attenuation_zero_noise_is_identity(self):
        day = synthesize_frame(SyntheticSceneParams(seed=9), 2)
        night = synthesize_frame(
            SyntheticSceneParams(seed=9, night=True, alpha=1.0, sigma=0.0), 2)
        assert np.array_equal(day.rgb, night.rgb)

    def test_lidar_zero_on_water_and_sky(self):
        for i in range(20):
            b = synthesize_frame(SyntheticSceneParams(seed=13), i)
            assert not b.lidar[b.labels == dataio.WATER].any()
            assert not b.lidar[b.labels == dataio.SKY].any()

    def test_all_classes_present(self):
        # Counted over many seeded frames: every class occurs in each frame
        # whenever at least one obstacle is requested.
        p = SyntheticSceneParams(seed=21, obstacle_count=(1, 4))
        for i in range(100):
            b = synthesize_frame(p, i)
            present = set(np.unique(b.labels).tolist())
            assert {0, 1, 2, 3} <= present

    def test_param_validation(self):
        with pytest.raises(DataError):
            SyntheticSceneParams(alpha=0.0)
        with pytest.raises(DataError):
            SyntheticSceneParams(sigma=-1.0)
        with pytest.raises(DataError):
            SyntheticSceneParams(horizon_range=(0.5, 0.2))


class TestSequenceRoundTrip:
    def test_lossless_channels_bit_exact(self, tmp_path):
        bundles = synth_bundles(5, seed=3)
        save_sequence(bundles, tmp_path / "seq")
        manifest = load_sequence(tmp_path / "seq")
        loaded = load_bundles(manifest, [f.frame_id for f in manifest.frames()])
        assert len(loaded) == 5
        for orig, back in zip(bundles, loaded):
            assert np.array_equal(orig.labels, back.labels)
            assert np.array_equal(orig.thermal, back.thermal)
            assert np.array_equal(orig.lidar, back.lidar)
            assert back.timestamp == orig.timestamp
            assert back.tags["timeofday"] == "day"

    def test_rgb_within_jpeg_tolerance(self, tmp_path):
        bundles = synth_bundles(3, seed=4)
        save_sequence(bundles, tmp_path / "seq")
        manifest = load_sequence(tmp_path / "seq")
        for orig, fid in zip(bundles, [f.frame_id for f in manifest.frames()]):
            back = load_bundle(manifest, fid)
            diff = np.abs(orig.rgb - back.rgb)
            assert diff.max() < 0.2
            assert diff.mean() < 0.02

    def test_double_round_trip_stable(self, tmp_path):
        # Lossless channels stay bit-identical through a second write/read
        # cycle; the JPEG channel only drifts within a small tolerance.
        bundles = synth_bundles(2, seed=6)
        save_sequence(bundles, tmp_path / "a")
        m1 = load_sequence(tmp_path / "a")
        first = load_bundles(m1, [f.frame_id for f in m1.frames()])
        save_sequence(first, tmp_path / "b")
        m2 = load_sequence(tmp_path / "b")
        second = load_bundles(m2, [f.frame_id for f in m2.frames()])
        for a, b in zip(first, second):
            assert np.abs(a.rgb - b.rgb).max() < 0.1
            assert np.array_equal(a.thermal, b.thermal)
            assert np.array_equal(a.lidar, b.lidar)
            assert np.array_equal(a.labels, b.labels)

    def test_zero_frames_valid_empty(self, tmp_path):
        save_sequence([], tmp_path / "empty_seq")
        manifest = load_sequence(tmp_path / "empty_seq")
        assert manifest.frames() == []

    def test_empty_directory_rejected(self, tmp_path):
        (tmp_path / "nothing").mkdir()
        with pytest.raises(DataError, match="no sequence metadata found"):
            load_sequence(tmp_path / "nothing")

    def test_availability_bookkeeping(self, tmp_path):
        bundles = synth_bundles(2, seed=8)
        for b in bundles:
            b.valid["lidar"] = False
            b.lidar = np.zeros_like(b.lidar)
            b.lidar_cloud = None
        save_sequence(bundles, tmp_path / "seq")
        manifest = load_sequence(tmp_path / "seq")
        for info in manifest.frames():
            assert info.available["rgb"] and info.available["thermal"]
            assert not info.available["lidar"]
        back = load_bundle(manifest, manifest.frames()[0].frame_id)
        assert not back.valid["lidar"]
        assert not back.lidar.any()

    def test_metadata_for_missing_frame_rejected(self, tmp_path):
        save_sequence(synth_bundles(2, seed=1), tmp_path / "seq")
        (tmp_path / "seq" / "rgb" / "000001.jpg").unlink()
        with pytest.raises(DataError, match="missing frames"):
            load_sequence(tmp_path / "seq")

    def test_malformed_calibration_names_file(self, tmp_path):
        save_sequence(synth_bundles(1, seed=1), tmp_path / "seq")
        bad = tmp_path / "seq" / "calib" / "rgb.txt"
        bad.write_text("1 2 3\n")
        with pytest.raises(DataError, match="rgb.txt"):
            load_sequence(tmp_path / "seq")

    def test_gps_round_trip(self, tmp_path):
        gps = [{"frame": "000000", "latitude": 46.05123, "longitude": 14.51,
                "altitude": 280.0, "roll": -1.25, "pitch": 0.5, "yaw": 123.0}]
        save_sequence(synth_bundles(1, seed=2), tmp_path / "seq", gps=gps)
        back = dataio.parse_gps(tmp_path / "seq" / "gps.csv")
        assert back == gps

    def test_point_records_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        radar = rng.uniform(-10, 10, (7, 5)).astype(np.float32)
        write_point_records(tmp_path / "r.bin", radar)
        assert np.array_equal(read_point_records(tmp_path / "r.bin"), radar)

    def test_point_records_truncation_detected(self, tmp_path):
        write_point_records(tmp_path / "r.bin", np.ones((4, 4), dtype=np.float32))
        raw = (tmp_path / "r.bin").read_bytes()
        (tmp_path / "r.bin").write_bytes(raw[:-8])
        with pytest.raises(DataError):
            read_point_records(tmp_path / "r.bin")

    def test_multi_sequence_root(self, tmp_path):
        save_sequence(synth_bundles(2, seed=1), tmp_path / "day")
        save_sequence(synth_bundles(1, seed=2, night=True), tmp_path / "night")
        manifest = load_sequence(tmp_path)
        assert sorted(manifest.sequences) == ["day", "night"]
        assert len(manifest.frames()) == 3
        ids = [f.frame_id for f in manifest.frames()]
        assert ids == ["day/000000", "day/000001", "night/000000"]

    def test_hand_built_minimal_sequence(self, tmp_path):
        # Two frames, rgb + thermal only: lidar/labels marked unavailable.
        seq = tmp_path / "minimal"
        (seq / "rgb").mkdir(parents=True)
        (seq / "thermal").mkdir()
        rng = np.random.default_rng(0)
        for i in range(2):
            dataio.write_rgb_jpeg(seq / "rgb" / f"{i:06d}.jpg",
                                  rng.uniform(0, 1, (16, 16, 3)))
            dataio.write_unit_png(seq / "thermal" / f"{i:06d}.png",
                                  rng.uniform(0, 1, (16, 16)))
        manifest = load_sequence(seq)
        frames = manifest.frames()
        assert len(frames) == 2
        for info in frames:
            assert info.available["rgb"] and info.available["thermal"]
            assert not info.available["lidar"] and not info.available["labels"]
        b = load_bundle(manifest, frames[0].frame_id)
        assert not b.valid["lidar"] and not b.lidar.any()
        assert (b.labels == IGNORE).all()


def tagged_manifest(tmp_path, n_day=10, n_night=4, night_location="river",
                    difficult_fraction=0.0):
    save_sequence(synth_bundles(n_day, seed=1,
                                difficult_fraction=difficult_fraction),
                  tmp_path / "day")
    if n_night:
        save_sequence(synth_bundles(n_night, seed=2, night=True,
                                    location=night_location),
                      tmp_path / "night")
    return load_sequence(tmp_path)


class TestSplits:
    def test_day_night_arithmetic(self, tmp_path):
        save_sequence(synth_bundles(100, seed=1), tmp_path / "day")
        save_sequence(synth_bundles(20, seed=2, night=True), tmp_path / "night")
        manifest = load_sequence(tmp_path)
        spec = make_splits(manifest, "day-night", val_ratio=0.1, seed=0)
        assert (len(spec.train), len(spec.val), len(spec.test)) == (90, 10, 20)
        assert all(fid.startswith("night/") for fid in spec.test)

    def test_no_night_frames_rejected(self, tmp_path):
        manifest = tagged_manifest(tmp_path, n_day=5, n_night=0)
        with pytest.raises(DataError, match="night-tagged"):
            make_splits(manifest, "day-night")

    def test_deterministic(self, tmp_path):
        manifest = tagged_manifest(tmp_path)
        a = make_splits(manifest, "day-night", val_ratio=0.3, seed=7)
        b = make_splits(manifest, "day-night", val_ratio=0.3, seed=7)
        assert a == b
        c = make_splits(manifest, "day-night", val_ratio=0.3, seed=8)
        assert a != c

    def test_disjoint_and_exhaustive(self, tmp_path):
        manifest = tagged_manifest(tmp_path)
        spec = make_splits(manifest, "day-night", val_ratio=0.25, seed=3)
        ids = set(spec.train) | set(spec.val) | set(spec.test)
        assert ids == {f.frame_id for f in manifest.frames()}
        assert len(spec.train) + len(spec.val) + len(spec.test) == len(ids)

    def test_geography_split(self, tmp_path):
        save_sequence(synth_bundles(6, seed=1, location="river"), tmp_path / "r1")
        save_sequence(synth_bundles(3, seed=2, location="lake"), tmp_path / "lake1")
        manifest = load_sequence(tmp_path)
        spec = make_splits(manifest, "geography", val_ratio=0.5, seed=0)
        assert all(fid.startswith("lake1/") for fid in spec.test)
        assert len(spec.test) == 3

    def test_saltwater_split(self, tmp_path):
        save_sequence(synth_bundles(6, seed=1, location="river"), tmp_path / "r1")
        save_sequence(synth_bundles(2, seed=2, location="sea"), tmp_path / "adriatic")
        manifest = load_sequence(tmp_path)
        spec = make_splits(manifest, "saltwater", val_ratio=0.5, seed=0)
        assert all(fid.startswith("adriatic/") for fid in spec.test)

    def test_difficult_split(self, tmp_path):
        manifest = tagged_manifest(tmp_path, n_day=40, n_night=0,
                                   difficult_fraction=0.3)
        spec = make_splits(manifest, "difficult", val_ratio=0.25, seed=0)
        by_id = {f.frame_id: f for f in manifest.frames()}
        assert spec.test and all(by_id[f].tags["difficult"] == "1" for f in spec.test)
        assert all(by_id[f].tags["difficult"] == "0"
                   for f in spec.train + spec.val)

    def test_missing_tag_rejected(self, tmp_path):
        save_sequence(synth_bundles(4, seed=1), tmp_path / "seq")
        meta = tmp_path / "seq" / "meta.csv"
        meta.write_text("frame,timeofday,difficult\n"
                        + "".join(f"{i:06d},day,0\n" for i in range(4)))
        manifest = load_sequence(tmp_path / "seq")
        with pytest.raises(DataError, match="location"):
            make_splits(manifest, "geography")

    def test_unknown_kind_rejected(self, tmp_path):
        manifest = tagged_manifest(tmp_path)
        with pytest.raises(DataError, match="unknown split kind"):
            make_splits(manifest, "bogus")

    def test_overlapping_spec_rejected(self):
        with pytest.raises(DataError, match="overlap"):
            SplitSpec(kind="day-night", train=("a",), val=("a",), test=())

    def test_save_load_round_trip(self, tmp_path):
        manifest = tagged_manifest(tmp_path)
        spec = make_splits(manifest, "day-night", val_ratio=0.2, seed=1)
        save_splits(spec, manifest.root)
        assert load_splits(manifest.root, "day-night") == spec


class TestEncodings:
    def test_unit_png_grid_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        vals = np.round(rng.uniform(0, 1, (10, 12)) * 65535) / 65535
        dataio.write_unit_png(tmp_path / "x.png", vals)
        assert np.array_equal(dataio.read_unit_png(tmp_path / "x.png"), vals)

    def test_depth_png_millimeter_grid(self, tmp_path):
        depth = np.array([[0.001, 1.5], [22.25, 65.535]])
        dataio.write_depth_png(tmp_path / "d.png", depth)
        assert np.allclose(dataio.read_depth_png(tmp_path / "d.png"), depth,
                           atol=5e-4)

    def test_labels_bit_identical(self, tmp_path):
        labels = np.array([[0, 1], [3, IGNORE]], dtype=np.uint8)
        dataio.write_label_png(tmp_path / "l.png", labels)
        assert np.array_equal(dataio.read_label_png(tmp_path / "l.png"), labels)
