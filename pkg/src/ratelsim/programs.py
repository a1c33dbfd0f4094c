"""The bundled guest corpus and helpers to run it in both worlds.

Each ``*.s`` file in the corpus directory is one program. A sibling
``*.script`` holds its event script; ``manifest.json`` adds stdin, initial
files and run options (``tcs``, ``quantum``, ...) per program.
"""
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .asm import assemble_file
from .binfmt import GuestBinary
from .host import EventScript, Host, VirtualFs
from .oracle import interpret
from .translator import RunConfig, run_dbt

# options shared by both worlds; everything else only configures the engine
SHARED_OPTIONS = ("quantum", "seed", "heap_max", "max_retired")


def load_binary(path):
    """Assemble ``.s`` sources; read anything else as a serialized binary."""
    path = Path(path)
    if path.suffix == ".s":
        return assemble_file(str(path))
    return GuestBinary.load(str(path))


def corpus_dir():
    return Path(str(resources.files("ratelsim").joinpath("corpus")))


@dataclass
class Program:
    name: str
    path: Path
    script_path: Path = None
    stdin: bytes = b""
    files: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)

    def binary(self):
        return load_binary(self.path)

    def script(self):
        return EventScript.load(str(self.script_path)) if self.script_path else None

    def host(self, adversary=None):
        vfs = VirtualFs({k: v.encode() for k, v in self.files.items()}, self.stdin)
        return Host(vfs, adversary)


def load_corpus(root=None):
    root = Path(root) if root else corpus_dir()
    manifest = {}
    mf = root / "manifest.json"
    if mf.exists():
        manifest = json.loads(mf.read_text())
    out = []
    paths = sorted(list(root.glob("*.s")) + list(root.glob("*.gb64")))
    for path in paths:
        if path.name == "lib.s":
            continue
        meta = manifest.get(path.name, {})
        script = path.with_suffix(".script")
        out.append(Program(path.stem, path, script if script.exists() else None,
                           meta.get("stdin", "").encode(), meta.get("files", {}),
                           meta.get("options", {})))
    return out


def run_both(prog, adversary_factory=None, **overrides):
    """Run ``prog`` under the oracle and the engine; returns (oracle, engine)."""
    opts = {**prog.options, **overrides}
    binary = prog.binary()
    shared = {k: opts[k] for k in SHARED_OPTIONS if k in opts}
    oracle = interpret(binary, prog.host(), prog.script(), **shared)
    adv = adversary_factory() if adversary_factory else None
    cfg = RunConfig(**opts)
    engine = run_dbt(binary, prog.host(adv), prog.script(), cfg)
    return oracle, engine
