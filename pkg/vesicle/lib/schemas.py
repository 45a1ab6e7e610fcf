"""JSON schemas for the documents the pipeline writes and later reads back."""

_TRIPLE_INT = {"type": "array", "items": {"type": "integer"}, "minItems": 3, "maxItems": 3}
_TRIPLE_NUM = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}

FUSION_PARAMS_SCHEMA = {
    "type": "object",
    "properties": {
        "threshold": {"type": "number", "minimum": 0, "maximum": 1},
        "min2d": {"type": "integer", "minimum": 0},
        "max2d": {"type": "integer", "minimum": 0},
        "min3d": {"type": "integer", "minimum": 0},
        "persistence": {"type": "integer", "minimum": 1},
        "connectivity2d": {"enum": [4, 8]},
        "connectivity3d": {"enum": [6, 18, 26]},
    },
    "required": ["threshold", "min2d", "max2d", "min3d", "persistence"],
}

OBJECT_MANIFEST_SCHEMA = {
    "type": "object",
    "properties": {
        "label_volume": {"type": "string"},
        "source_dims": _TRIPLE_INT,
        "resolution": _TRIPLE_NUM,
        "params": {"anyOf": [FUSION_PARAMS_SCHEMA, {"type": "null"}]},
        "objects": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "id": {"type": "integer", "minimum": 1},
                    "centroid": _TRIPLE_NUM,
                    "bbox": {
                        "type": "object",
                        "properties": {"min": _TRIPLE_INT, "max": _TRIPLE_INT},
                        "required": ["min", "max"],
                    },
                    "voxel_count": {"type": "integer", "minimum": 1},
                    "z_extent": {"type": "integer", "minimum": 1},
                },
                "required": ["id", "centroid", "bbox", "voxel_count", "z_extent"],
            },
        },
    },
    "required": ["label_volume", "source_dims", "objects"],
}

FEATURE_MANIFEST_SCHEMA = {
    "type": "object",
    "properties": {
        "channels": {"type": "array", "items": {"type": "string"}, "minItems": 10, "maxItems": 10},
        "files": {"type": "array", "items": {"type": "string"}, "minItems": 10, "maxItems": 10},
        "dims": _TRIPLE_INT,
        "resolution": _TRIPLE_NUM,
        "feature_order_tag": {"type": "string", "pattern": "^[0-9a-f]{16}$"},
        "variant": {"type": "string"},
    },
    "required": ["channels", "files", "dims", "resolution", "feature_order_tag", "variant"],
}

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "tool": {"const": "vesicle"},
        "version": {"type": "string"},
        "subcommand": {"type": "string"},
        "params": {"type": "object"},
    },
    "required": ["tool", "version", "subcommand", "params"],
}

BLOCK_MANIFEST_SCHEMA = {
    "type": "object",
    "properties": {
        "index": {"type": "integer", "minimum": 0},
        "core": {"type": "object"},
        "padded": {"type": "object"},
        "label_volume": {"type": "string"},
        "objects": OBJECT_MANIFEST_SCHEMA["properties"]["objects"],
    },
    "required": ["index", "core", "padded", "label_volume", "objects"],
}
