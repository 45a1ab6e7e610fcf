from enum import Enum

__all__ = ["BaseEnum", "VoxelType", "MaskProvenance", "Channel", "FeatureVariant"]


class BaseEnum(str, Enum):
    @classmethod
    def values(cls):
        return [e.value for e in cls]


class VoxelType(BaseEnum):
    """Voxel types a VSV1 volume may carry, in dtype-code order."""

    U8 = "u8"
    F32 = "f32"
    U32 = "u32"

    @property
    def code(self):
        return list(VoxelType).index(self)

    @classmethod
    def from_code(cls, code):
        return list(cls)[code]


class MaskProvenance(BaseEnum):
    ExternalProbability = "external-probability"
    IntensityBandpass = "intensity-bandpass"
    Synthetic = "synthetic"


class Channel(BaseEnum):
    """Feature channels. Declaration order is the model contract."""

    IntensityTheta0 = "intensity_theta0"
    IntensityTheta1 = "intensity_theta1"
    LbpTheta0 = "lbp_theta0"
    GradmagTheta1 = "gradmag_theta1"
    GradmagTheta2 = "gradmag_theta2"
    VesiclesTheta2 = "vesicles_theta2"
    VesiclesTheta3 = "vesicles_theta3"
    VesicleDistance = "vesicle_distance"
    StructureTheta1 = "structure_theta1"
    StructureTheta2 = "structure_theta2"


class FeatureVariant(BaseEnum):
    Full = "full"
    NoVesicles = "no-vesicles"
