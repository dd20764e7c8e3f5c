CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "binfactor Configuration Schema",
    "description": "Schema for the JSON/JSON5 configuration file",
    "type": "object",
    "properties": {
        "nq_threads": {"type": "integer", "minimum": 1, "description": "Worker cap for per-layer processing."},
        "logs_dir": {"type": "string", "description": "Directory for log files."},
        "log_level": {"type": "string", "enum": ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]},
        "admm_iters": {"type": "integer", "minimum": 1},
        "admm_tol": {"type": "number", "exclusiveMinimum": 0},
        "admm_ridge": {"type": "number", "minimum": 0},
        "gamma": {"type": "number", "minimum": 0, "maximum": 1},
        "percentile": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "eps_floor": {"type": "number", "exclusiveMinimum": 0},
        "scale_floor": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer"},
        "pipeline": {
            "type": "object",
            "description": "PipelineConfig overrides applied by 'factorize'.",
            "properties": {
                "rank": {"type": "integer", "minimum": 1},
                "target_bpw": {"type": "number", "exclusiveMinimum": 0},
                "group_size": {"type": "integer", "minimum": 1},
                "activation": {"type": "string", "enum": ["none", "relu"]},
                "gamma": {"type": "number", "minimum": 0, "maximum": 1},
                "percentile": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "seed": {"type": "integer"},
                "admm": {"type": "object"},
                "tune_pre": {"type": "object"},
                "tune_post": {"type": "object"},
                "tune_global": {"type": "object"},
            },
        },
    },
    "required": [],
}
