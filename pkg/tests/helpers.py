"""Builders for randomized and hand-laid test instances."""

import numpy as np

from emdet.data import (Dataset, GroundTruth, ImageRecord, StrongAnnotation,
                        WeakAnnotation)
from emdet.geometry import Box
from emdet.latent import ImageLabel
from emdet.scorer import ScorerParams


def random_box(rng, canvas=100.0, min_size=4.0, max_size=40.0):
    w = rng.uniform(min_size, max_size)
    h = rng.uniform(min_size, max_size)
    x1 = rng.uniform(0.0, canvas - w)
    y1 = rng.uniform(0.0, canvas - h)
    return Box(x1, y1, x1 + w, y1 + h)


def isolated_boxes(count, size=5.0, gap=20.0):
    """Boxes on a diagonal with zero pairwise overlap."""
    return [Box(gap * i, gap * i, gap * i + size, gap * i + size)
            for i in range(count)]


def random_weak_record(rng, image_id="img_0", num_proposals=6, num_fg=2,
                       feature_dim=5, num_present=None):
    if num_present is None:
        num_present = int(rng.integers(1, num_fg + 1))
    cats = np.sort(rng.choice(np.arange(1, num_fg + 1), size=num_present,
                              replace=False))
    boxes = [random_box(rng) for _ in range(num_proposals)]
    features = rng.normal(0.0, 1.0, size=(num_proposals, feature_dim))
    return ImageRecord(image_id, 100.0, 100.0, boxes, features,
                       WeakAnnotation(ImageLabel(tuple(int(c) for c in cats))))


def strong_record(image_id, proposals, features, objects):
    return ImageRecord(image_id, 100.0, 100.0, proposals, features,
                       StrongAnnotation(tuple(GroundTruth(b, c)
                                              for b, c in objects)))


def random_params(rng, num_categories, feature_dim, scale=0.5):
    return ScorerParams(rng.normal(0.0, scale,
                                   size=(num_categories, feature_dim + 1)))


def fg_log_probs(p_fg):
    """B x 2 log-prob rows [log(1-p), log(p)] from foreground probabilities."""
    p = np.asarray(p_fg, dtype=np.float64)
    return np.stack([np.log(1.0 - p), np.log(p)], axis=1)


def single_record_dataset(record):
    return Dataset([record])


def weak_record(image_id, boxes, features, categories):
    return ImageRecord(image_id, 100.0, 100.0, boxes, features,
                       WeakAnnotation(ImageLabel(categories)))


def isolated_weak_record(image_id, count, categories, features=None, dim=4):
    boxes = isolated_boxes(count)
    if features is None:
        features = np.zeros((count, dim))
    return weak_record(image_id, boxes, features, categories)
