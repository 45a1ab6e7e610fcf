import contextlib
import json
import logging
import os
import tempfile

from numba import jit
import numpy as np

from vesicle.exceptions import DataError, FormatError, ParameterError, raise_io_error

log = logging.getLogger("vesicle")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
FNV_PRIME_U64 = np.uint64(FNV_PRIME)

PNG_EXTENSIONS = {".png"}


@jit(cache=True, nopython=True, nogil=True)
def _fnv1a_64_bytes(data, h):
    for i in range(data.shape[0]):
        h = (h ^ np.uint64(data[i])) * FNV_PRIME_U64
    return h


def fnv1a_64(data, h=FNV_OFFSET):
    """64-bit FNV-1a over a bytes-like object.

    Pass the previous return value as `h` to continue a running checksum over several
    buffers.
    """
    buffer = np.frombuffer(memoryview(data).cast("B"), dtype=np.uint8)
    return int(_fnv1a_64_bytes(buffer, np.uint64(h)))


@contextlib.contextmanager
def atomic_write(path, mode="wb", encoding=None):
    """Open a temporary file next to `path` and move it into place on success.

    Readers never see a half-written file; on error the temporary file is removed and the
    previous contents of `path` (if any) survive.
    """
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        fd, tmp_path = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    except OSError as e:
        raise_io_error(path, e)

    try:
        with os.fdopen(fd, mode, encoding=encoding) as fp:
            yield fp
        os.replace(tmp_path, path)
    except OSError as e:
        _silent_remove(tmp_path)
        raise_io_error(path, e)
    except BaseException:
        _silent_remove(tmp_path)
        raise


def _silent_remove(path):
    try:
        os.remove(path)
    except OSError:
        pass


def dump_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(path, obj):
    with atomic_write(path, mode="w", encoding="utf-8") as fp:
        fp.write(dump_json(obj))


def read_json(path, schema=None):
    """Load a JSON document, optionally validating it against a jsonschema schema."""
    try:
        with open(path, "r", encoding="utf-8") as fp:
            doc = json.load(fp)
    except OSError as e:
        raise_io_error(path, e)
    except ValueError as e:
        raise FormatError("{}: not valid JSON ({})".format(path, e))

    if schema is not None:
        import jsonschema

        try:
            jsonschema.validate(doc, schema)
        except jsonschema.ValidationError as e:
            raise FormatError("{}: {}".format(path, e.message))

    return doc


def list_png_stack(directory):
    """Return the PNG files of `directory` sorted lexically (the z order of the stack)."""
    try:
        names = sorted(os.listdir(directory))
    except OSError as e:
        raise_io_error(directory, e)

    paths = [
        os.path.join(directory, name)
        for name in names
        if os.path.splitext(name)[1].lower() in PNG_EXTENSIONS
    ]
    if not paths:
        raise ParameterError("{}: no PNG files found".format(directory))
    return paths


def read_png_stack(directory):
    """Read equally sized grayscale PNGs as a uint8 array indexed [z, y, x]."""
    import numpy as np
    from PIL import Image

    slices = []
    for path in list_png_stack(directory):
        try:
            with Image.open(path) as img:
                plane = np.asarray(img.convert("L"), dtype=np.uint8)
        except OSError as e:
            raise DataError("{}: cannot read image ({})".format(path, e))

        if slices and plane.shape != slices[0].shape:
            raise FormatError(
                "{}: slice is {}x{}, expected {}x{}".format(
                    path, plane.shape[1], plane.shape[0], slices[0].shape[1], slices[0].shape[0]
                )
            )
        slices.append(plane)

    log.debug("Read %i PNG slices from %s", len(slices), directory)
    return np.stack(slices, axis=0)


def write_png(path, rgb):
    """Write an (h, w, 3) uint8 array as a PNG without any metadata chunks."""
    from PIL import Image

    img = Image.fromarray(rgb)
    with atomic_write(path, mode="wb") as fp:
        img.save(fp, format="PNG")
