"""LoRA adapters with gradient-approximation (LoRA-GA) initialization."""

from .ga_init import GaInitConfig, lora_ga_initialize
from .lora import InitScheme, adapt_network, compute_scaling, initialize
from .nn import Network, NetworkSpec

__all__ = [
    "GaInitConfig",
    "InitScheme",
    "Network",
    "NetworkSpec",
    "adapt_network",
    "compute_scaling",
    "initialize",
    "lora_ga_initialize",
]
__version__ = "0.1.0"
