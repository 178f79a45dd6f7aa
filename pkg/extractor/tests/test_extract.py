import json

import numpy as np
import pytest
from PIL import Image

from sketch_extractor.cli import main
from sketch_extractor.extract import (
    BACKBONE_DIMS,
    ExtractorConfig,
    extract,
    list_inputs,
)

from sketchlab.data import load_embedding_set

BACKBONES = sorted(BACKBONE_DIMS)


def write_sample_images(root, per_class=1):
    """Three classes of small solid/color-pattern images."""
    colors = [(220, 40, 40), (40, 220, 40), (40, 40, 220)]
    for idx, color in enumerate(colors):
        sub = root / f"class{idx}"
        sub.mkdir(parents=True)
        for j in range(per_class):
            img = Image.new("RGB", (64, 48), color)
            for x in range(0, 64, 8):  # add a little structure
                for y in range(0, 48, 8):
                    if (x + y + j * 8) % 16 == 0:
                        img.paste((255, 255, 255), (x, y, x + 4, y + 4))
            img.save(sub / f"img{j}.png")
    return root


@pytest.fixture(scope="module")
def image_dir(tmp_path_factory):
    return write_sample_images(tmp_path_factory.mktemp("imgs"))


def run_config(image_dir, out, backbone, **kw):
    images, labels, names = list_inputs(image_dir)
    return extract(ExtractorConfig(
        backbone=backbone, images=images, labels=labels, label_names=names,
        out=out, weights="none", seed=0, **kw,
    ))


class TestInputs:
    def test_class_subdirs(self, image_dir):
        images, labels, names = list_inputs(image_dir)
        assert names == ["class0", "class1", "class2"]
        assert labels == [0, 1, 2]
        assert len(images) == 3

    def test_csv_manifest(self, image_dir, tmp_path):
        images, _, _ = list_inputs(image_dir)
        manifest = tmp_path / "m.csv"
        lines = ["path,label"] + [f"{p},cls{i % 2}" for i, p in enumerate(images)]
        manifest.write_text("\n".join(lines) + "\n")
        paths, labels, names = list_inputs(manifest)
        assert names == ["cls0", "cls1"]
        assert labels == [0, 1, 0]

    def test_bad_source(self, tmp_path):
        with pytest.raises(ValueError, match="neither"):
            list_inputs(tmp_path / "nope.txt")


@pytest.mark.parametrize("backbone", BACKBONES)
class TestConformance:
    def test_output_passes_primary_loader(self, image_dir, tmp_path, backbone):
        out = run_config(image_dir, tmp_path / backbone, backbone)
        es = load_embedding_set(out)  # runs the full invariant suite
        assert es.n == 3
        assert es.d == BACKBONE_DIMS[backbone]
        assert es.label_names == ("class0", "class1", "class2")
        meta = json.loads((out / "meta.json").read_text())
        payload = (out / "embeddings.f32").read_bytes()
        assert len(payload) == meta["n"] * meta["d"] * 4
        assert (out / "preprocess.json").exists()

    def test_repeated_extraction_byte_identical(self, image_dir, tmp_path, backbone):
        a = run_config(image_dir, tmp_path / "a", backbone)
        b = run_config(image_dir, tmp_path / "b", backbone)
        for name in ("meta.json", "embeddings.f32", "labels.u32"):
            assert (a / name).read_bytes() == (b / name).read_bytes()


class TestBehavior:
    def test_same_image_twice_identical_rows(self, image_dir, tmp_path):
        images, labels, names = list_inputs(image_dir)
        out = extract(ExtractorConfig(
            backbone="mobilenet_v3_small",
            images=[images[0], images[0], images[1]],
            labels=[0, 0, 1],
            label_names=names,
            out=tmp_path / "dup",
            weights="none",
        ))
        es = load_embedding_set(out)
        np.testing.assert_array_equal(es.data[0], es.data[1])
        assert not np.array_equal(es.data[0], es.data[2])

    def test_row_order_matches_input_list(self, image_dir, tmp_path):
        images, labels, names = list_inputs(image_dir)
        fwd = extract(ExtractorConfig(
            backbone="mobilenet_v3_small", images=images, labels=labels,
            label_names=names, out=tmp_path / "fwd", weights="none",
        ))
        rev = extract(ExtractorConfig(
            backbone="mobilenet_v3_small", images=images[::-1], labels=labels[::-1],
            label_names=names, out=tmp_path / "rev", weights="none",
        ))
        a = load_embedding_set(fwd)
        b = load_embedding_set(rev)
        np.testing.assert_array_equal(a.data, b.data[::-1])

    def test_batching_does_not_change_rows(self, image_dir, tmp_path):
        a = run_config(image_dir, tmp_path / "b1", "mobilenet_v3_small", batch_size=1)
        b = run_config(image_dir, tmp_path / "b3", "mobilenet_v3_small", batch_size=3)
        ea, eb = load_embedding_set(a), load_embedding_set(b)
        np.testing.assert_allclose(ea.data, eb.data, atol=1e-5)

    def test_unreadable_image_rejected(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not an image")
        with pytest.raises(ValueError, match="unreadable"):
            extract(ExtractorConfig(
                backbone="mobilenet_v3_small", images=[bad], labels=[0],
                label_names=["x"], out=tmp_path / "out", weights="none",
            ))

    def test_config_validation(self, image_dir, tmp_path):
        images, labels, names = list_inputs(image_dir)
        with pytest.raises(ValueError, match="backbone"):
            ExtractorConfig(backbone="alexnet", images=images, labels=labels,
                            label_names=names, out=tmp_path)
        with pytest.raises(ValueError, match="images"):
            ExtractorConfig(backbone="vgg16", images=images, labels=[0],
                            label_names=names, out=tmp_path)


class TestCli:
    def test_cli_round_trip(self, image_dir, tmp_path, capsys):
        out = tmp_path / "set"
        code = main(["--backbone", "mobilenet_v3_small", "--images", str(image_dir),
                     "--out", str(out), "--weights", "none"])
        assert code == 0
        assert "576" in capsys.readouterr().out
        es = load_embedding_set(out)
        assert es.n == 3

    def test_cli_bad_source_exit_code(self, tmp_path, capsys):
        code = main(["--backbone", "resnet50", "--images", str(tmp_path / "nope.txt"),
                     "--out", str(tmp_path / "o"), "--weights", "none"])
        assert code == 1
        err = json.loads(capsys.readouterr().err.strip())
        assert err["error"] == "validation"


@pytest.mark.skipif(
    "not config.getoption('--run-pretrained', default=False)",
    reason="needs downloaded ImageNet weights (pass --run-pretrained)",
)
def test_pretrained_weights_extraction(image_dir, tmp_path):
    images, labels, names = list_inputs(image_dir)
    out = extract(ExtractorConfig(
        backbone="resnet50", images=images, labels=labels, label_names=names,
        out=tmp_path / "pre", weights="imagenet",
    ))
    es = load_embedding_set(out)
    assert es.d == 2048
