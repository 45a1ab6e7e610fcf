import logging

import numpy as np

from vesicle.exceptions import ParameterError
from vesicle.lib.files import write_png

log = logging.getLogger("vesicle")

OVERLAY_COLORS = {
    "truth": (0, 255, 0),
    "detection": (0, 0, 255),
    "overlap": (255, 0, 0),
    "vesicle": (255, 255, 0),
}


def _labels_of(objects, dims):
    if objects is None:
        return None
    grid = objects.label_grid() if hasattr(objects, "label_grid") else objects
    if tuple(grid.dims) != tuple(dims):
        raise ParameterError(
            "Overlay labels {} do not match the EM volume {}".format(grid.dims, dims)
        )
    return grid.data


def render_overlay(em, z, truth=None, detections=None, vesicles=None, alpha=1.0, path=None):
    """Render slice `z` of an EM volume with truth and detections painted on top.

    Truth-only pixels are green, detection-only pixels blue and pixels covered by both red;
    vesicle centroids in the slice are yellow.

    Parameters
    ----------
    em : `VoxelGrid`
        u8 EM volume.
    z : `int`
        Slice index.
    truth, detections : `ObjectSet` or u32 `VoxelGrid`, optional
    vesicles : `VesicleSet`, optional
    alpha : `float`
        Opacity of the painted colours, 1.0 replaces the grey value.
    path : `str`, optional
        Also write the image as a PNG.

    Returns
    -------
    (ny, nx, 3) uint8 RGB array.
    """
    nx, ny, nz = em.dims
    if not 0 <= z < nz:
        raise ParameterError("Slice {} is outside 0-{}".format(z, nz - 1))
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError("alpha must lie in [0, 1], got {}".format(alpha))

    gray = em.data[z].astype(np.float64)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)

    truth_labels = _labels_of(truth, em.dims)
    det_labels = _labels_of(detections, em.dims)
    in_truth = truth_labels[z] > 0 if truth_labels is not None else np.zeros((ny, nx), bool)
    in_det = det_labels[z] > 0 if det_labels is not None else np.zeros((ny, nx), bool)

    paint = [
        (in_truth & ~in_det, OVERLAY_COLORS["truth"]),
        (in_det & ~in_truth, OVERLAY_COLORS["detection"]),
        (in_truth & in_det, OVERLAY_COLORS["overlap"]),
    ]
    if vesicles is not None and len(vesicles):
        marks = np.zeros((ny, nx), bool)
        here = vesicles.centroids[vesicles.centroids[:, 2] == z]
        marks[here[:, 1], here[:, 0]] = True
        paint.append((marks, OVERLAY_COLORS["vesicle"]))

    for where, color in paint:
        rgb[where] = (1.0 - alpha) * rgb[where] + alpha * np.asarray(color, dtype=np.float64)

    image = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    if path is not None:
        write_png(path, image)
        log.debug("Wrote slice %i overlay to %s", z, path)
    return image
