"""Learning the augmented (load, initial point) -> solution map of an AC-OPF solver."""

from augopf.case import NetworkCase, load_case, parse_case, serialize_case, validate_case

__version__ = "0.1.0"

__all__ = ["NetworkCase", "load_case", "parse_case", "serialize_case", "validate_case", "__version__"]
