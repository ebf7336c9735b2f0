# Services module
from .config import AttentionVariant, ModelConfig, PartitionSpec, RunConfig
from .errors import ConfigError, DataError, NumericError, ShapeError, ShatterError, VariantContractError

__all__ = [
    'AttentionVariant', 'ModelConfig', 'PartitionSpec', 'RunConfig',
    'ShatterError', 'ConfigError', 'DataError', 'NumericError', 'ShapeError', 'VariantContractError',
]
