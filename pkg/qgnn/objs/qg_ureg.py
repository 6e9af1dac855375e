import pint
from pint import UnitRegistry

ureg = UnitRegistry()
ureg.define("node = [graph_node]")
pint.set_application_registry(ureg)
ureg.default_format = "~P"


def megabytes(n_bytes: int) -> float:
    return ureg.Quantity(n_bytes, ureg.byte).to(ureg.megabyte).magnitude
