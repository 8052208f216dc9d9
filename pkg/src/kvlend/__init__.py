"""Distributed KV cache placement for long-context LLM serving.

Modules:

- ``distattention``: blockwise attention partials and their exact aggregation
- ``perfmodel``: analytical layer-time and throughput model
- ``scheduler``: greedy lending planner over instance snapshots
- ``controlplane``: gManager / rManager protocol state machines
- ``simengine``: discrete-event cluster simulator and trace generator
- ``cli``: the ``kvlend`` command
"""

from .errors import ConfigError, ContractError, KvlendError, RejectedInputError

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "KvlendError", "RejectedInputError", "__version__"]
