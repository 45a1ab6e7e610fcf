import logging
import sys

__all__ = ["VoxelGrid", "load_volume", "save_volume"]

formatter = logging.Formatter("%(asctime)s %(levelname)s: %(message)s")
stream_handler = logging.StreamHandler(sys.stderr)
stream_handler.setFormatter(formatter)

log = logging.getLogger("vesicle")
log.setLevel(logging.INFO)
log.addHandler(stream_handler)

from vesicle.volume import VoxelGrid, load_volume, save_volume  # noqa
from vesicle.cli import vesicle as Cli  # noqa
