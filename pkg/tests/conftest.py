import json

import numpy as np
import pytest
from PIL import Image

CORPUS_CLASSES = ["Mentha spicata", "Psidium guajava", "Rauwolfia serpentina"]


def write_image(path, array):
    """Write an HxWx3 uint8 array as PNG or JPEG based on the suffix."""
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)


def shape_image(class_idx: int, rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Synthetic corpus image: class-specific dominant color + shape + noise.

    Classes are separable by color alone, so even random frozen features
    keep them linearly separable.
    """
    base = np.zeros((size, size, 3), dtype=np.float64)
    color = np.zeros(3)
    color[class_idx % 3] = 200.0
    cy, cx = rng.integers(size // 4, 3 * size // 4, size=2)
    r = int(rng.integers(size // 6, size // 3))
    yy, xx = np.mgrid[0:size, 0:size]
    if class_idx % 3 == 0:
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif class_idx % 3 == 1:
        mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    else:
        mask = (np.abs(yy - cy) + np.abs(xx - cx)) <= r
    base[mask] = color
    base += rng.normal(0, 12.0, base.shape)
    return np.clip(base, 0, 255).astype(np.uint8)


def build_corpus(root, classes, per_class: int, seed: int = 0, size: int = 64):
    """Create a label-per-subdirectory image tree; returns the root."""
    rng = np.random.default_rng(seed)
    for idx, label in enumerate(classes):
        d = root / label
        d.mkdir(parents=True)
        for i in range(per_class):
            write_image(d / f"img_{i:03d}.png", shape_image(idx, rng, size))
    return root


def herb_info_entries(classes):
    entries = []
    for i, name in enumerate(classes):
        entries.append(
            {
                "scientific_name": name,
                "common_names": [f"herb {i}"],
                "description": f"Example description for {name}.",
                "medicinal_uses": "Traditional preparations; culinary seasoning.",
                "regions": ["Nepal", "South Asia"],
            }
        )
    return entries


def write_herb_info(path, classes):
    path.write_text(json.dumps(herb_info_entries(classes), indent=1))
    return path


@pytest.fixture
def corpus_dir(tmp_path):
    return build_corpus(tmp_path / "corpus", CORPUS_CLASSES, per_class=6, seed=13)


@pytest.fixture
def herb_info_path(tmp_path):
    return write_herb_info(tmp_path / "herbs.json", CORPUS_CLASSES)


@pytest.fixture(scope="session")
def served_artifacts(tmp_path_factory):
    """Corpus, herb store, and a zero-head 256x256 package shared by the
    serve/CLI tests (zero head makes predictions exactly uniform)."""
    from herbid.modelpack import save_package, serialize
    from herbid.nnrt import build_tiny_densenet

    root = tmp_path_factory.mktemp("served")
    corpus = build_corpus(root / "corpus", CORPUS_CLASSES, per_class=4, seed=21)
    herbs = write_herb_info(root / "herbs.json", CORPUS_CLASSES)
    graph, weights = build_tiny_densenet(num_classes=len(CORPUS_CLASSES), seed=9)
    model_path = root / "model.hmp1"
    save_package(serialize(graph, weights, None, CORPUS_CLASSES, "none"), model_path)
    sample_image = corpus / CORPUS_CLASSES[0] / "img_000.png"
    return {
        "root": root,
        "corpus": corpus,
        "herbs": herbs,
        "model": model_path,
        "image": sample_image,
        "classes": CORPUS_CLASSES,
    }
