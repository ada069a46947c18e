import json

import numpy as np
import pytest
from PIL import Image

from cifedsim.feature_store import read_fedf
from fedf_export import BACKBONES, ExportJob, export, list_images, weight_checksum
from fedf_export.export import _Embedder


@pytest.fixture(scope="module")
def toy_folder(tmp_path_factory):
    """Two classes, five images each, deterministic pixel content."""
    root = tmp_path_factory.mktemp("images")
    rng = np.random.default_rng(0)
    for name in ("cat", "dog"):
        d = root / name
        d.mkdir()
        for i in range(5):
            pixels = rng.integers(0, 255, size=(48, 64, 3), dtype=np.uint8)
            Image.fromarray(pixels).save(d / f"img_{i}.png")
    return root


def job_for(root, out, **kw):
    return ExportJob(input_root=str(root), backbone="resnet18",
                     output_path=str(out), seed=3, **kw)


def test_export_parses_with_read_fedf_and_width_matches(toy_folder, tmp_path):
    out = tmp_path / "toy.fedf"
    manifest = export(job_for(toy_folder, out, manifest_path=str(tmp_path / "m.json")))
    ds = read_fedf(out)
    assert len(ds) == 10
    assert ds.dim == BACKBONES["resnet18"].embed_dim == manifest["dim"]
    assert ds.num_classes == 2
    # sorted path order: all cat records first, then dog
    assert ds.labels.tolist() == [0] * 5 + [1] * 5


def test_two_deterministic_runs_agree(toy_folder, tmp_path):
    a = tmp_path / "a.fedf"
    b = tmp_path / "b.fedf"
    export(job_for(toy_folder, a))
    export(job_for(toy_folder, b))
    va = read_fedf(a).vectors
    vb = read_fedf(b).vectors
    assert np.abs(va - vb).max() < 1e-5


def test_backbone_checksum_unchanged(toy_folder, tmp_path):
    job = job_for(toy_folder, tmp_path / "c.fedf")
    embedder = _Embedder(job)
    before = weight_checksum(embedder)
    manifest = export(job)
    assert manifest["weight_checksum"] == before


def test_manifest_maps_records(toy_folder, tmp_path):
    manifest = export(job_for(toy_folder, tmp_path / "d.fedf"))
    assert [r["index"] for r in manifest["records"]] == list(range(10))
    first = manifest["records"][0]
    assert first["label_name"] == "cat" and first["label_id"] == 0
    assert first["path"].startswith("cat/")
    assert manifest["skipped"] == []


def test_unreadable_image_skipped_and_listed(toy_folder, tmp_path):
    broken = toy_folder / "cat" / "broken.png"
    broken.write_bytes(b"not an image")
    try:
        manifest = export(job_for(toy_folder, tmp_path / "e.fedf"))
    finally:
        broken.unlink()
    assert len(manifest["records"]) == 10
    assert [s["path"] for s in manifest["skipped"]] == ["cat/broken.png"]
    ds = read_fedf(tmp_path / "e.fedf")
    assert len(ds) == 10


def test_empty_class_rejected(tmp_path):
    root = tmp_path / "root"
    (root / "only").mkdir(parents=True)
    with pytest.raises(ValueError, match="no images"):
        list_images(str(root))


def test_label_assignment_is_sorted_directory_order(toy_folder):
    classes, entries = list_images(str(toy_folder))
    assert classes == ["cat", "dog"]
    assert all(label == (0 if name == "cat" else 1)
               for _, name, label in entries)


def test_vit_cls_and_pool_widths(toy_folder, tmp_path):
    out = tmp_path / "vit.fedf"
    for feature in ("cls", "pool"):
        export(ExportJob(input_root=str(toy_folder), backbone="vit_b_16",
                         output_path=str(out), feature=feature, seed=1,
                         batch_size=4))
        assert read_fedf(out).dim == BACKBONES["vit_b_16"].embed_dim


def test_cli_roundtrip(toy_folder, tmp_path, capsys):
    from fedf_export.cli import main

    out = tmp_path / "cli.fedf"
    code = main(["--input-root", str(toy_folder), "--backbone", "resnet18",
                 "--out", str(out), "--manifest", str(tmp_path / "m.json"),
                 "--seed", "5"])
    assert code == 0
    assert "10 records" in capsys.readouterr().out
    manifest = json.loads((tmp_path / "m.json").read_text())
    assert manifest["dim"] == 512
    assert read_fedf(out).dim == 512


def test_unknown_backbone_rejected(toy_folder, tmp_path):
    with pytest.raises(ValueError, match="unknown backbone"):
        ExportJob(input_root=str(toy_folder), backbone="alexnet",
                  output_path=str(tmp_path / "x.fedf"))
