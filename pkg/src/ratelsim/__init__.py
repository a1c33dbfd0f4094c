"""Modeled SGX machine and an in-enclave dynamic binary translator.

Typical use::

    from ratelsim import assemble_file, Host, interpret, run_dbt
    binary = assemble_file("prog.s")
    oracle = interpret(binary, Host())
    engine = run_dbt(binary, Host())
"""
from .asm import assemble, assemble_file, disassemble
from .host import AdversaryPolicy, EventScript, Host, VirtualFs
from .oracle import interpret
from .trace import diff_results
from .translator import Engine, RunConfig, run_dbt

__all__ = ["assemble", "assemble_file", "disassemble", "AdversaryPolicy", "EventScript",
           "Host", "VirtualFs", "interpret", "diff_results", "Engine", "RunConfig", "run_dbt"]
__version__ = "0.1.0"
