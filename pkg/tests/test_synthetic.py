import math

import numpy as np
import pytest

from cueseg.pseudo_label import blob_converter, filter_boxes
from cueseg.synthetic import (SENTENCE_PROMPTS, Ellipse, make_synthetic_corpus, tight_box)


def test_corpus_is_deterministic():
    a = make_synthetic_corpus(5, seed=11, size=64)
    b = make_synthetic_corpus(5, seed=11, size=64)
    for x, y in zip(a, b):
        assert x.id == y.id and x.text == y.text and x.boxes == y.boxes
        np.testing.assert_array_equal(x.image, y.image)
        np.testing.assert_array_equal(x.mask, y.mask)


def test_ellipse_rasterisation_matches_pointwise_definition():
    e = Ellipse(cx=10.3, cy=7.8, a=5.5, b=3.0, theta=0.6)
    grid = e.rasterize(16, 24)
    for r in range(16):
        for c in range(24):
            dx, dy = c - e.cx, r - e.cy
            u = dx * math.cos(e.theta) + dy * math.sin(e.theta)
            v = -dx * math.sin(e.theta) + dy * math.cos(e.theta)
            assert grid[r, c] == ((u / e.a) ** 2 + (v / e.b) ** 2 <= 1.0)


def test_mask_boxes_and_image_agree():
    for s in make_synthetic_corpus(10, seed=5, size=96):
        assert s.image.dtype == np.float32 and s.image.shape == (96, 96, 3)
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert set(np.unique(s.mask)) <= {0, 1}
        assert len(s.boxes) == len(s.ellipses)
        for e, b in zip(s.ellipses, s.boxes):
            assert b == tight_box(e.rasterize(96, 96))


def test_blob_free_images_have_empty_masks_and_no_kept_boxes():
    corpus = make_synthetic_corpus(6, seed=0, size=64, max_blobs=0)
    for s in corpus:
        assert s.mask.sum() == 0
        assert filter_boxes(blob_converter(s.image, s.text)) == []


def test_specks_are_filtered_by_confidence():
    for s in make_synthetic_corpus(8, seed=9, min_blobs=1):
        kept = filter_boxes(blob_converter(s.image, s.text))
        assert sorted(b.xyxy() for b in kept) == sorted(tuple(map(float, b)) for b in s.boxes)


def test_sentence_prompts_and_bad_arguments():
    s = make_synthetic_corpus(3, seed=1, granularity="sentence")
    assert all(x.text in SENTENCE_PROMPTS for x in s)
    with pytest.raises(ValueError):
        make_synthetic_corpus(0)
    with pytest.raises(ValueError):
        make_synthetic_corpus(2, granularity="paragraph")
