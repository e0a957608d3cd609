from .harness import (
    DECODING_METHODS,
    DecodingConfig,
    GenerationError,
    Generator,
    build_training_pools,
    generate_candidates,
    generate_pool,
    import_external_candidates,
)

__all__ = [
    "DECODING_METHODS",
    "DecodingConfig",
    "GenerationError",
    "Generator",
    "build_training_pools",
    "generate_candidates",
    "generate_pool",
    "import_external_candidates",
]
