import pytest

from ratelsim.abi import PAGE, PROT_READ, PROT_WRITE
from ratelsim.asm import assemble
from ratelsim.host import Host, VirtualFs
from ratelsim.machine import Machine, MachineConfig
from ratelsim.programs import corpus_dir, load_corpus

# criterion id -> (title, verdict, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def build(source):
    """Assemble inline guest source; ``.include "lib.s"`` resolves to the corpus."""
    return assemble(source, base_dir=str(corpus_dir()))


def host(stdin=b"", files=None, adversary=None):
    return Host(VirtualFs(dict(files or {}), stdin), adversary)


def small_machine(tcs=2, nssa=3, platform=None, base=0x10000):
    """An initialized enclave with one code page, one data page and the
    TCS/SSA pages; entry is the code page."""
    cfg = MachineConfig(epc_size=1 << 20, public_size=1 << 20, nssa=nssa, tcs_count=tcs,
                        entry_va=base, enclave_base_va=base, enclave_span=0x100000)
    m = Machine(cfg, platform)
    m.eadd_page(base, PROT_READ, "code")
    m.eadd_page(base + PAGE, PROT_READ | PROT_WRITE, "data")
    va = base + 2 * PAGE
    for _ in range(tcs):
        m.eadd_page(va, PROT_READ | PROT_WRITE, "tcs")
        va += PAGE
        for _ in range(nssa):
            m.eadd_page(va, PROT_READ | PROT_WRITE, "ssa")
            va += PAGE
    m.einit()
    return m


@pytest.fixture(scope="session")
def corpus():
    return {p.name: p for p in load_corpus()}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        title, verdict, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"criterion {cid:>2} {verdict}  {title}: {detail}")
