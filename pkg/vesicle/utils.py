import concurrent.futures
from functools import wraps
import logging
import os
import sys

import click

from vesicle.exceptions import VesicleException


log = logging.getLogger("vesicle")

OPTION_HELP = {
    "verbose": "Log extra information to STDERR",
    "workers": (
        "Number of worker threads (defaults to $VESICLE_WORKERS, then the number of cores). "
        "Outputs do not depend on this value."
    ),
    "config": "Reuse the resolved parameters of a previous run.json as defaults",
    "seed": "Seed for every random choice made by this command",
    "dims": "Volume size as nx,ny,nz voxels",
    "resolution": "Voxel size as rx,ry,rz in nm",
    "membrane": "Membrane mask (u8 0/1) or membrane probability (f32) volume",
    "membrane_threshold": "Probability at or above which a voxel counts as membrane",
    "membrane_band": (
        "Estimate membranes with an intensity bandpass given as lo,hi quantiles "
        "(e.g. 0.02,0.80) instead of --membrane"
    ),
    "band_reference": (
        "Label volume whose foreground intensities define the bandpass quantiles "
        "(defaults to the EM volume itself)"
    ),
    "vesicles": "Vesicle centroid file (x y z score per line); detected on the fly if omitted",
    "no_vesicle_features": "Ablate the vesicle channels (train and score without vesicles)",
    "threshold": "Probability threshold",
    "min2d": "Minimum voxels of a per-slice component",
    "max2d": "Maximum voxels of a per-slice component",
    "min3d": "Minimum voxels of a 3D object",
    "persistence": "Minimum number of slices an object must span",
    "connectivity2d": "In-plane connectivity (4 or 8)",
    "connectivity3d": "3D connectivity (6, 18 or 26)",
    "vesicle_threshold": "Minimum matched-filter response of a vesicle candidate",
    "nms_radius": "In-plane non-maximum suppression radius in pixels",
    "cluster_radius": "Radius in nm within which vesicles count as a cluster",
    "cluster_min": "Minimum cluster size (including the vesicle itself)",
    "template_radius": "Ring radius of the synthetic vesicle template in pixels",
    "template_thickness": "Ring thickness of the synthetic vesicle template in pixels",
    "template_side": "Side length of the vesicle template in pixels (odd)",
    "exemplars": "Build the template from patches around these vesicles instead of a ring",
    "min_overlap": "Minimum fraction of a truth object a detection must cover to count",
    "pad": "Padding as px,py,pz voxels",
    "block_size": "Block core size as bx,by,bz voxels",
    "resume": "Skip blocks whose outputs already exist and pass their checksum",
    "density": "Synapses per cubic micron",
    "cluster_rate": "Mean number of vesicles per synapse cluster (Poisson)",
    "noise": "Standard deviation of the Gaussian noise added to intensities",
    "vesicle_radius": "Radius of a synthetic vesicle in pixels",
    "match_radius": "In-plane distance in pixels within which a vesicle counts as found",
    "n_samples": "Training voxels, half synapse and half other membrane",
    "n_trees": "Number of trees",
    "mtry": "Features tried at each split",
    "min_leaf": "Minimum samples in a leaf",
    "max_depth": "Maximum tree depth",
    "distance_cap": "Cap in nm of the nearest-vesicle distance channel",
    "save_features": "Also write the feature channels to this directory",
    "becker": "Use the threshold-and-size baseline instead of 2D-then-3D fusion",
    "becker_min_voxels": "Minimum object size of the threshold-and-size baseline",
    "discard_border": "Drop objects whose ownership point lies within px,py,pz of the border",
    "thresholds": "Probability thresholds, as a,b,c or start:stop:step",
    "min2d_values": "min2d values to sweep, as a,b,c or start:stop:step",
    "max2d_values": "max2d values to sweep, as a,b,c or start:stop:step",
    "min3d_values": "min3d values to sweep, as a,b,c or start:stop:step",
    "persistence_values": "Persistence values to sweep, as a,b,c or start:stop:step",
    "plot": "Write a precision-recall chart (.html or .json)",
    "z": "Slice index to render",
    "alpha": "Opacity of the overlay colours in [0, 1]",
    "downsample": "Integer in-plane downsampling factor (block mean)",
}


class CliLogFormatter(logging.Formatter):
    formats = {logging.DEBUG: "DEBUG: %(module)s: %(lineno)d: %(msg)s", logging.INFO: "%(msg)s"}

    def __init__(self):
        super(CliLogFormatter, self).__init__(fmt="%(levelname)s: %(msg)s", datefmt=None)
        self.original_format = self._style._fmt

    def format(self, record):
        self._style._fmt = self.formats.get(record.levelno, self.original_format)
        return logging.Formatter.format(self, record)


def pretty_errors(fn):
    """Decorate CLI functions, turning a `VesicleException` into a message and an exit code.

    Parameter problems exit with 1, data and format problems with 2.
    """

    @wraps(fn)
    def pretty_errors_wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except VesicleException as e:
            sys.stderr.write("ERROR: {}\n".format(e))
            sys.exit(e.exit_code)

    return pretty_errors_wrapper


def default_workers():
    return os.cpu_count() or 1


def run_via_threadpool(fn, iterable, fn_kwargs=None, max_threads=1):
    """Apply `fn` to every item and return the results in input order.

    With `max_threads == 1` everything runs in the calling thread.
    """
    fn_kwargs = fn_kwargs or {}
    items = list(iterable)

    if max_threads is None or max_threads <= 1 or len(items) <= 1:
        return [fn(item, **fn_kwargs) for item in items]

    with concurrent.futures.ThreadPoolExecutor(max_workers=max_threads) as executor:
        futures = [executor.submit(fn, item, **fn_kwargs) for item in items]
        try:
            return [future.result() for future in futures]
        except KeyboardInterrupt:
            for future in futures:
                future.cancel()
            raise


def chunk_ranges(n, n_chunks):
    """Split range(n) into at most `n_chunks` contiguous (start, stop) pairs."""
    n_chunks = max(1, min(n, n_chunks))
    bounds = [n * i // n_chunks for i in range(n_chunks + 1)]
    return [(bounds[i], bounds[i + 1]) for i in range(n_chunks) if bounds[i] < bounds[i + 1]]


def map_slices(fn, array, workers=1, out_dtype=None):
    """Apply a 2D `fn` to every z-slice of a [z, y, x] array, slabs spread over workers."""
    import numpy as np

    def _slab(bounds):
        start, stop = bounds
        return np.stack([fn(array[z]) for z in range(start, stop)], axis=0)

    slabs = run_via_threadpool(_slab, chunk_ranges(array.shape[0], workers), max_threads=workers)
    out = np.concatenate(slabs, axis=0)
    if out_dtype is not None:
        out = out.astype(out_dtype, copy=False)
    return out


def parse_triple(kind=int):
    """Build a click callback that parses `a,b,c` into a tuple of `kind`."""

    def _callback(ctx, param, value):
        if value is None or isinstance(value, (tuple, list)):
            return tuple(value) if value is not None else None
        parts = [p.strip() for p in str(value).split(",")]
        if len(parts) != 3:
            raise click.BadParameter("expected three comma-separated values, got {}".format(value))
        try:
            return tuple(kind(p) for p in parts)
        except ValueError:
            raise click.BadParameter("could not parse {}".format(value))

    return _callback


def parse_pair(ctx, param, value):
    """Parse `lo,hi` floats (a click callback)."""
    if value is None or isinstance(value, (tuple, list)):
        return tuple(value) if value is not None else None
    parts = [p.strip() for p in str(value).split(",")]
    try:
        lo, hi = (float(p) for p in parts)
    except ValueError:
        raise click.BadParameter("expected lo,hi, got {}".format(value))
    return lo, hi


def parse_list(kind=float):
    """Build a click callback parsing `a,b,c` lists or `start:stop:step` ranges."""

    def _callback(ctx, param, value):
        if value is None or isinstance(value, (tuple, list)):
            return list(value) if value is not None else None
        value = str(value)
        try:
            if ":" in value:
                start, stop, step = (float(p) for p in value.split(":"))
                count = int(round((stop - start) / step)) + 1
                return [kind(round(start + i * step, 10)) for i in range(count)]
            return [kind(p.strip()) for p in value.split(",") if p.strip()]
        except (ValueError, ZeroDivisionError):
            raise click.BadParameter("could not parse {}".format(value))

    return _callback
