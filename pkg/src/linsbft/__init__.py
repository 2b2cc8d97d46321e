"""LinSBFT: a pipelined BFT consensus engine with linear message complexity,
run over a seeded partial-synchrony network simulator."""
from .chain import Block, BlockGraph, make_genesis
from .crypto import keygen_dealer, select_collector
from .engine import EngineParams, EpochContext, Validator

__all__ = ["Block", "BlockGraph", "make_genesis", "keygen_dealer", "select_collector", "EngineParams", "EpochContext", "Validator"]
