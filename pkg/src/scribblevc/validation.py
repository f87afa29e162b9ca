"""Input checks for the estimator API."""

import numpy as np
from sklearn.utils.validation import check_array


def check_images(X, image_size=None):
    """Return ``X`` as a float (n, H, W) array with values in [0, 1].

    A single 2-D image is promoted to a batch of one.
    """
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    if X.ndim == 4 and X.shape[1] == 1:
        X = X[:, 0]
    if X.ndim != 3:
        raise ValueError(f"expected images shaped (n, H, W), got {X.shape}")
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_samples=1)
    if X.min() < 0 or X.max() > 1:
        raise ValueError("image intensities must lie in [0, 1]")
    if X.shape[1] != X.shape[2]:
        raise ValueError(f"images must be square, got {X.shape[1]}x{X.shape[2]}")
    if image_size is not None and X.shape[1] != image_size:
        raise ValueError(f"expected {image_size}x{image_size} images, got {X.shape[1]}x{X.shape[2]}")
    return X


def check_scribbles(y, X, num_classes):
    """Integer scribble grids aligned with ``X``; ``num_classes`` marks unlabeled pixels."""
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.shape != X.shape:
        raise ValueError(f"scribbles shaped {y.shape} do not match images {X.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("scribble labels must be integers")
        y = y.astype(np.int64)
    if y.min() < 0 or y.max() > num_classes:
        raise ValueError(f"scribble labels must lie in 0..{num_classes} "
                         f"({num_classes} = unlabeled)")
    if not np.any(y < num_classes):
        raise ValueError("scribbles carry no labeled pixels")
    return y


def check_masks(masks, X, num_classes):
    masks = np.asarray(masks)
    if masks.ndim == 2:
        masks = masks[None]
    if masks.shape != X.shape:
        raise ValueError(f"masks shaped {masks.shape} do not match images {X.shape}")
    if masks.min() < 0 or masks.max() >= num_classes:
        raise ValueError(f"mask labels must lie in 0..{num_classes - 1}")
    return masks.astype(np.int64)
