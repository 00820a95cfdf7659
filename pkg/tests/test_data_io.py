import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rangevit.data_io import (
    FormatError,
    SceneSpec,
    generate_scan,
    generate_scene,
    load_model_weights,
    load_name_map,
    load_pretrained,
    read_labels,
    read_pgm,
    read_point_cloud,
    read_range_image,
    read_weight_archive,
    resample_pos_embed,
    write_iou_csv,
    write_labels,
    write_pgm,
    write_point_cloud,
    write_range_image,
    write_weight_archive,
)
from rangevit.data_io.synthetic import Box, Cylinder, ray_directions, scene_objects
from rangevit.model import ModelConfig, RangeViT
from rangevit.projection import PointCloud, SensorFov, range_preview, spherical_project, unfold_scan

# -- point clouds and labels -------------------------------------------------------


def test_point_cloud_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    pts = rng.normal(0, 20, (500, 4)).astype(np.float32)
    write_point_cloud(tmp_path / "a.bin", PointCloud(pts))
    back = read_point_cloud(tmp_path / "a.bin")
    assert back.points.tobytes() == pts.tobytes()


def test_point_cloud_sizes(tmp_path):
    (tmp_path / "two.bin").write_bytes(np.arange(8, dtype="<f4").tobytes())
    assert len(read_point_cloud(tmp_path / "two.bin")) == 2
    (tmp_path / "empty.bin").write_bytes(b"")
    assert len(read_point_cloud(tmp_path / "empty.bin")) == 0


def test_point_cloud_partial_record(tmp_path):
    (tmp_path / "bad.bin").write_bytes(bytes(33))
    with pytest.raises(FormatError) as err:
        read_point_cloud(tmp_path / "bad.bin")
    assert err.value.offset == 32


def test_point_cloud_non_finite_reports_offset(tmp_path):
    pts = np.ones((5, 4), dtype="<f4")
    pts[3, 2] = np.nan
    (tmp_path / "nan.bin").write_bytes(pts.tobytes())
    with pytest.raises(FormatError, match="point 3") as err:
        read_point_cloud(tmp_path / "nan.bin")
    assert err.value.offset == 48


def test_labels_low_bits_and_round_trip(tmp_path):
    raw = np.array([0x00010004, 7, 0, 0xFFFF0002], dtype="<u4")
    (tmp_path / "l.label").write_bytes(raw.tobytes())
    np.testing.assert_array_equal(read_labels(tmp_path / "l.label", 4), [4, 7, 0, 2])
    write_labels(tmp_path / "w.label", raw)
    assert (tmp_path / "w.label").read_bytes() == raw.tobytes()


def test_labels_all_zero_and_map(tmp_path):
    (tmp_path / "z.label").write_bytes(bytes(40))
    assert not read_labels(tmp_path / "z.label", 10).any()
    raw = np.array([40, 48, 0, 40], dtype="<u4")
    (tmp_path / "m.label").write_bytes(raw.tobytes())
    mapped = read_labels(tmp_path / "m.label", 4, {0: 0, 40: 1, 48: 2})
    np.testing.assert_array_equal(mapped, [1, 2, 0, 1])


def test_labels_unmapped_id_listed(tmp_path):
    raw = np.array([40, 99, 0], dtype="<u4")
    (tmp_path / "m.label").write_bytes(raw.tobytes())
    with pytest.raises(FormatError, match=r"\[99\]") as err:
        read_labels(tmp_path / "m.label", 3, {0: 0, 40: 1})
    assert err.value.offset == 4


def test_labels_length_mismatch(tmp_path):
    (tmp_path / "s.label").write_bytes(bytes(12))
    with pytest.raises(FormatError, match="expected 16 bytes"):
        read_labels(tmp_path / "s.label", 4)


# -- range images and previews ------------------------------------------------------


def _scan_image(seed=0):
    spec = SceneSpec(seed=seed, beams=16, width=64)
    cloud = generate_scene(spec)
    return spherical_project(cloud, spec.fov, 16, 64)


def test_range_image_round_trip(tmp_path):
    img = _scan_image()
    write_range_image(tmp_path / "i.rvri", img)
    back = read_range_image(tmp_path / "i.rvri")
    for name in ("features", "occupancy", "pixel_owner", "point_pixel", "point_valid"):
        a, b = getattr(img, name), getattr(back, name)
        assert a.dtype == b.dtype and a.tobytes() == b.tobytes(), name
    assert (back.skipped, back.overflow, back.collisions) == (img.skipped, img.overflow, img.collisions)


def test_range_image_truncation_and_magic(tmp_path):
    img = _scan_image(1)
    write_range_image(tmp_path / "i.rvri", img)
    raw = (tmp_path / "i.rvri").read_bytes()
    for cut in (3, 20, 40, len(raw) // 2, len(raw) - 1):
        (tmp_path / "t.rvri").write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            read_range_image(tmp_path / "t.rvri")
    (tmp_path / "x.rvri").write_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        read_range_image(tmp_path / "x.rvri")
    (tmp_path / "m.rvri").write_bytes(b"XXXXX\n" + raw[6:])
    with pytest.raises(FormatError, match="magic") as err:
        read_range_image(tmp_path / "m.rvri")
    assert err.value.offset == 0


def test_pgm_round_trip(tmp_path):
    preview = range_preview(_scan_image(2))
    write_pgm(tmp_path / "p.pgm", preview)
    assert (tmp_path / "p.pgm").read_bytes().startswith(b"P5\n64 16\n255\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "p.pgm"), preview)


def test_iou_csv_layout(tmp_path):
    write_iou_csv(tmp_path / "iou.csv", np.array([0.5, np.nan, 1.0]), 0.75, {1: "ground", 3: "pole"})
    lines = (tmp_path / "iou.csv").read_text().splitlines()
    assert lines == ["class_id,name,iou", "1,ground,0.500000", "2,,nan", "3,pole,1.000000", "mean,,0.750000"]


# -- weight archives ----------------------------------------------------------------


def _toy_model(seed=0, **kw):
    return RangeViT(ModelConfig.toy(**kw), seed=seed)


def test_archive_round_trip_toy_model(tmp_path):
    model = _toy_model()
    model.params.buffers["bn_probe"] = np.float32([1.5, -2.0])  # buffers travel too
    write_weight_archive(tmp_path / "m.rvwt", model.params)
    back = read_weight_archive(tmp_path / "m.rvwt")
    original = model.params.arrays()
    assert list(back) == list(original)
    for k, v in original.items():
        assert back[k].shape == v.shape and back[k].tobytes() == v.astype("<f4").tobytes(), k


def test_archive_header_only(tmp_path):
    write_weight_archive(tmp_path / "e.rvwt", {})
    assert (tmp_path / "e.rvwt").read_bytes() == b"RVWT1\n" + struct.pack("<I", 0)
    assert read_weight_archive(tmp_path / "e.rvwt") == {}


def test_archive_scalar_and_empty_tensors(tmp_path):
    arrays = {"scalar": np.float32(3.5), "empty": np.zeros((0, 4), np.float32), "v": np.arange(3, dtype=np.float32)}
    write_weight_archive(tmp_path / "s.rvwt", arrays)
    back = read_weight_archive(tmp_path / "s.rvwt")
    assert back["scalar"].shape == () and back["scalar"] == 3.5
    assert back["empty"].shape == (0, 4)


def test_archive_layout_is_documented_one(tmp_path):
    write_weight_archive(tmp_path / "a.rvwt", {"ab": np.float32([[1, 2, 3]])})
    raw = (tmp_path / "a.rvwt").read_bytes()
    payload = np.float32([1, 2, 3]).astype("<f4").tobytes()
    expected = (b"RVWT1\n" + struct.pack("<I", 1) + struct.pack("<I", 2) + b"ab" + struct.pack("<3I", 2, 1, 3)
                + struct.pack("<II", 0, zlib.crc32(payload)) + payload)
    assert raw == expected


@settings(max_examples=25, deadline=None)
@given(st.data())
def test_archive_corrupt_payload_byte_detected(tmp_path_factory, data):
    tmp = tmp_path_factory.mktemp("corrupt")
    rng = np.random.default_rng(data.draw(st.integers(0, 10_000)))
    arrays = {f"t{i}": rng.standard_normal(rng.integers(1, 6, 2)).astype(np.float32) for i in range(4)}
    write_weight_archive(tmp / "a.rvwt", arrays)
    raw = bytearray((tmp / "a.rvwt").read_bytes())
    payload_bytes = 4 * sum(v.size for v in arrays.values())
    pos = data.draw(st.integers(len(raw) - payload_bytes, len(raw) - 1))
    raw[pos] ^= 1 << data.draw(st.integers(0, 7))
    (tmp / "b.rvwt").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="checksum"):
        read_weight_archive(tmp / "b.rvwt")


def test_archive_every_truncation_rejected(tmp_path):
    write_weight_archive(tmp_path / "a.rvwt", {"w": np.ones((2, 3), np.float32), "b": np.zeros(3, np.float32)})
    raw = (tmp_path / "a.rvwt").read_bytes()
    for cut in range(len(raw)):
        (tmp_path / "t.rvwt").write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            read_weight_archive(tmp_path / "t.rvwt")


def _entry(name, shape, offset, payload):
    enc = name.encode()
    return (struct.pack("<I", len(enc)) + enc + struct.pack("<I", len(shape))
            + struct.pack(f"<{len(shape)}I", *shape) + struct.pack("<II", offset, zlib.crc32(payload)))


def test_archive_duplicate_names(tmp_path):
    p = np.float32([1.0]).tobytes()
    raw = b"RVWT1\n" + struct.pack("<I", 2) + _entry("w", (1,), 0, p) + _entry("w", (1,), 4, p) + p + p
    (tmp_path / "d.rvwt").write_bytes(raw)
    with pytest.raises(FormatError, match="duplicate"):
        read_weight_archive(tmp_path / "d.rvwt")


def test_archive_overlapping_offsets(tmp_path):
    p = np.float32([1.0, 2.0]).tobytes()
    raw = b"RVWT1\n" + struct.pack("<I", 2) + _entry("a", (2,), 0, p) + _entry("b", (2,), 4, p[4:] + p[:4]) + p + p
    (tmp_path / "o.rvwt").write_bytes(raw)
    with pytest.raises(FormatError, match="offset"):
        read_weight_archive(tmp_path / "o.rvwt")


def test_archive_bad_magic_and_trailing(tmp_path):
    (tmp_path / "m.rvwt").write_bytes(b"RVWT2\n" + bytes(4))
    with pytest.raises(FormatError, match="magic"):
        read_weight_archive(tmp_path / "m.rvwt")
    write_weight_archive(tmp_path / "a.rvwt", {"w": np.ones(2, np.float32)})
    (tmp_path / "x.rvwt").write_bytes((tmp_path / "a.rvwt").read_bytes() + bytes(4))
    with pytest.raises(FormatError, match="trailing"):
        read_weight_archive(tmp_path / "x.rvwt")


def test_model_weights_round_trip_gives_same_outputs(tmp_path):
    a, b = _toy_model(0), _toy_model(1)
    write_weight_archive(tmp_path / "a.rvwt", a.params)
    load_model_weights(tmp_path / "a.rvwt", b)
    for k, v in a.params.arrays().items():
        assert v.tobytes() == b.params.arrays()[k].tobytes()
    with pytest.raises(ValueError, match="does not match"):
        load_model_weights(tmp_path / "a.rvwt", _toy_model(depth=1))


# -- pretrained import ------------------------------------------------------------------


def _external_names(model):
    """Model encoder tensors under the bundled external naming."""
    reverse = {}
    for ext, internal in load_name_map():
        if "{i}" in ext:
            for i in range(model.config.depth):
                reverse[internal.replace("{i}", str(i))] = ext.replace("{i}", str(i))
        else:
            reverse[internal] = ext
    return {reverse[k]: t.data.copy() for k, t in model.params.items() if k in reverse}


def test_import_identity_archive(tmp_path):
    src, dst = _toy_model(0), _toy_model(5)
    write_weight_archive(tmp_path / "a.rvwt", {k: v for k, v in src.params.arrays().items()})
    report = load_pretrained(tmp_path / "a.rvwt", dst, "full")
    assert report.resampled == [] and report.missing == []
    enc = [k for k in src.params.names() if k.startswith("encoder.")]
    assert sorted(report.copied) == sorted(enc)
    for k in enc:
        np.testing.assert_array_equal(dst.params[k].data, src.params[k].data)
    # stem, decoder and refiner keep their own initialization
    assert not np.array_equal(dst.params["stem.block0.conv1.weight"].data, src.params["stem.block0.conv1.weight"].data)
    assert "stem.block0.conv1.weight" in report.unmatched


def test_import_external_names_and_unknown(tmp_path):
    src, dst = _toy_model(0), _toy_model(3)
    arrays = _external_names(src)
    assert len(arrays) == sum(k.startswith("encoder.") for k in src.params.names())
    arrays["head.weight"] = np.zeros((10, 64), np.float32)  # classifier of an image model
    arrays["blocks.7.norm1.weight"] = np.ones(64, np.float32)  # deeper than the target
    report = load_pretrained(arrays, dst, "LN")
    assert sorted(report.unmatched) == ["blocks.7.norm1.weight", "head.weight"]
    np.testing.assert_array_equal(dst.params["encoder.block1.ffn.fc2.weight"].data,
                                  src.params["encoder.block1.ffn.fc2.weight"].data)
    assert not dst.params.is_trainable("encoder.block0.attn.qkv.weight")
    assert dst.params.is_trainable("encoder.block0.ln1.weight")


def test_import_resamples_14x14_pos_embed_onto_16x48():
    cfg = ModelConfig(embed_dim=32, num_heads=2, depth=1, hidden_dim=16, stem_width=8, num_classes=4)
    assert (cfg.grid_height, cfg.grid_width) == (16, 48)
    model = RangeViT(cfg, seed=0)
    rng = np.random.default_rng(0)
    source = rng.standard_normal((1, 197, 32)).astype(np.float32)
    cls = rng.standard_normal((1, 1, 32)).astype(np.float32)
    report = load_pretrained({"pos_embed": source, "cls_token": cls}, model, "full")
    assert report.resampled == ["encoder.pos_embed"]
    pe = model.params["encoder.pos_embed"].data
    assert pe.shape == (16 * 48 + 1, 32)
    np.testing.assert_array_equal(pe[0], source[0, 0])  # class-token row copied unchanged
    np.testing.assert_array_equal(model.params["encoder.cls_token"].data.reshape(-1), cls.reshape(-1))


def test_resample_preserves_constant_and_linear_fields():
    const = np.full((196, 3), 0.7)
    np.testing.assert_allclose(resample_pos_embed(const, 16, 48, use_class_token=False), 0.7, atol=1e-12)
    # bilinear resampling with half-pixel alignment reproduces a linear ramp away from the borders
    ii, jj = np.meshgrid(np.arange(14), np.arange(14), indexing="ij")
    ramp = np.stack([ii, jj], axis=-1).reshape(-1, 2).astype(float)
    out = resample_pos_embed(ramp, 28, 28, use_class_token=False).reshape(28, 28, 2)
    centers = (np.arange(28) + 0.5) / 2 - 0.5
    np.testing.assert_allclose(out[2:-2, 2:-2, 0], np.broadcast_to(centers[2:-2, None], (24, 24)), atol=1e-12)
    np.testing.assert_allclose(out[2:-2, 2:-2, 1], np.broadcast_to(centers[None, 2:-2], (24, 24)), atol=1e-12)


def test_resample_needs_grid_for_non_square():
    with pytest.raises(ValueError, match="infer the grid"):
        resample_pos_embed(np.zeros((60, 4)), 4, 4, use_class_token=False)
    out = resample_pos_embed(np.zeros((51, 4)), 4, 4, True, source_grid=(5, 10))
    assert out.shape == (17, 4)


def test_import_shape_conflict_names_tensor():
    model = _toy_model()
    with pytest.raises(ValueError, match="encoder.block0.attn.qkv.weight"):
        load_pretrained({"blocks.0.attn.qkv.weight": np.zeros((3, 3), np.float32)}, model)


def test_import_unknown_policy():
    with pytest.raises(ValueError, match="policy"):
        load_pretrained({}, _toy_model(), "LN+XYZ")


# -- synthetic scenes -------------------------------------------------------------------


def test_ground_only_scene():
    spec = SceneSpec(seed=0, ground_z=-2.0, num_boxes=0, num_cylinders=0, num_poles=0)
    cloud = generate_scene(spec)
    assert len(cloud) > 0
    assert np.all(cloud.labels == 1)
    np.testing.assert_allclose(cloud.xyz[:, 2], -2.0, atol=1e-5)


def test_scene_determinism_and_seed_sensitivity():
    a, b = generate_scene(SceneSpec(seed=4)), generate_scene(SceneSpec(seed=4))
    assert a.points.tobytes() == b.points.tobytes() and np.array_equal(a.labels, b.labels)
    c = generate_scene(SceneSpec(seed=5))
    assert len(c) != len(a) or not np.array_equal(c.points, a.points)


def test_scene_validation():
    with pytest.raises(ValueError, match="at least one"):
        SceneSpec(ground=False, num_boxes=0, num_cylinders=0, num_poles=0)
    with pytest.raises(ValueError):
        SceneSpec(beams=0)


def test_occluding_box_is_nearest():
    spec = SceneSpec(num_boxes=0, num_cylinders=0, num_poles=0, beams=32, width=256)
    base = generate_scan(spec)
    box = Box((8.0, 0.0, -1.73 + 1.0), (1.0, 1.5, 1.0))
    dirs, _, _ = ray_directions(spec.beams, spec.width, spec.fov)
    from rangevit.data_io.synthetic import cast_rays, hit_plane

    dist, label = cast_rays(dirs, spec, [box], [])
    plane = hit_plane(dirs, spec.ground_z)
    boxed = label == 2
    assert boxed.sum() > 20
    assert np.all(dist[boxed] < plane[boxed])
    assert len(base.cloud) == int((plane <= spec.max_range).sum())


def _sdf_box(p, box):
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    q = p - np.asarray(box.center)
    local = np.stack([c * q[:, 0] + s * q[:, 1], -s * q[:, 0] + c * q[:, 1], q[:, 2]], axis=1)
    d = np.abs(local) - np.asarray(box.half_size)
    return np.linalg.norm(np.maximum(d, 0), axis=1) + np.minimum(d.max(axis=1), 0)


def _sdf_cylinder(p, cyl):
    radial = np.hypot(p[:, 0] - cyl.center_xy[0], p[:, 1] - cyl.center_xy[1]) - cyl.radius
    mid, half = (cyl.z_min + cyl.z_max) / 2, (cyl.z_max - cyl.z_min) / 2
    d = np.stack([radial, np.abs(p[:, 2] - mid) - half], axis=1)
    return np.linalg.norm(np.maximum(d, 0), axis=1) + np.minimum(d.max(axis=1), 0)


def sphere_trace(dirs, spec, boxes, cylinders, iters=6000, eps=1e-9):
    """Independent oracle: march along each ray by the scene's distance bound."""
    t = np.zeros(len(dirs))
    live = np.arange(len(dirs))
    for _ in range(iters):
        p = dirs[live] * t[live, None]
        parts = [_sdf_box(p, b) for b in boxes] + [_sdf_cylinder(p, c) for c in cylinders]
        if spec.ground:
            parts.append(p[:, 2] - spec.ground_z)
        d = np.min(parts, axis=0)
        t[live] += d
        live = live[(d > eps) & (t[live] < spec.max_range + 1)]
        if not live.size:
            break
    p = dirs * t[:, None]
    labels = [b.label for b in boxes] + [c.label for c in cylinders] + ([1] if spec.ground else [])
    parts = [_sdf_box(p, b) for b in boxes] + [_sdf_cylinder(p, c) for c in cylinders]
    if spec.ground:
        parts.append(p[:, 2] - spec.ground_z)
    parts = np.array(parts)
    hit = (parts.min(axis=0) < 1e-6) & (t <= spec.max_range)
    label = np.where(hit, np.asarray(labels)[parts.argmin(axis=0)], 0)
    return np.where(hit, t, np.inf), label


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_generator_matches_sphere_tracing_oracle(seed):
    spec = SceneSpec(seed=seed, beams=32, width=256, num_boxes=6, num_cylinders=4, num_poles=5)
    scan = generate_scan(spec)
    dirs, rows, cols = ray_directions(spec.beams, spec.width, spec.fov)
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(dirs), 1500, replace=False)
    boxes, cylinders = scene_objects(spec)
    oracle_t, oracle_label = sphere_trace(dirs[pick], spec, boxes, cylinders)
    # map generated points back to their rays
    ray_of = {(r, c): i for i, (r, c) in enumerate(zip(scan.rows, scan.cols))}
    got_t = np.full(len(pick), np.inf)
    got_label = np.zeros(len(pick), dtype=np.int64)
    ranges = scan.cloud.ranges()
    for n, i in enumerate(pick):
        j = ray_of.get((rows[i], cols[i]))
        if j is not None:
            got_t[n], got_label[n] = ranges[j], scan.cloud.labels[j]
    np.testing.assert_array_equal(np.isfinite(got_t), np.isfinite(oracle_t))
    np.testing.assert_array_equal(got_label, oracle_label)
    hit = np.isfinite(oracle_t)
    np.testing.assert_allclose(got_t[hit], oracle_t[hit], rtol=1e-5, atol=1e-4)


def test_vertical_ray_hits_cylinder_cap():
    from rangevit.data_io.synthetic import hit_cylinder

    cyl = Cylinder((0.0, 0.0), 1.0, -3.0, -1.0)
    t = hit_cylinder(np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 1.0]]), cyl)
    assert t[0] == pytest.approx(1.0) and np.isinf(t[1])


@pytest.mark.parametrize("seed", range(5))
def test_generator_collision_budget(seed):
    spec = SceneSpec(seed=seed, beams=32, width=512)
    cloud = generate_scene(spec)
    img = spherical_project(cloud, spec.fov, spec.beams, spec.width)
    assert img.collisions <= len(cloud) / 1e4


def test_generator_pixel_alignment():
    scan = generate_scan(SceneSpec(seed=7, beams=16, width=128, fov=SensorFov(3.0, -25.0)))
    img = spherical_project(scan.cloud, SensorFov(3.0, -25.0), 16, 128)
    np.testing.assert_array_equal(img.integer_pixels(), np.stack([scan.rows, scan.cols], axis=1))
    assert np.abs(img.point_pixel - np.floor(img.point_pixel) - 0.5).max() < 1e-3


def test_enclosure_gives_full_rows_for_unfold():
    spec = SceneSpec(seed=3, enclosure=True)
    scan = generate_scan(spec)
    assert len(scan.cloud) == spec.beams * spec.width
    img = unfold_scan(scan.cloud, spec.beams, spec.width)
    np.testing.assert_array_equal(np.floor(img.point_pixel[:, 0]).astype(int), scan.rows)
    assert img.collisions == 0 and img.overflow == 0


def test_class_imbalance():
    counts = np.bincount(generate_scene(SceneSpec(seed=0)).labels, minlength=5)
    assert counts[1] == counts.max() and counts[1] > 0.5 * counts.sum()
