"""
Sandbox executors
Runs proof-of-concept scripts isolated from the host: a container-backed executor and a scripted fake
"""
import asyncio
import logging
import os
import shutil
import tempfile
from abc import ABC, abstractmethod
from pathlib import Path
from typing import List, Optional, Tuple

from refaudit.config import RunConfig
from refaudit.models.verification import SandboxResult
from refaudit.services.llm_client import load_scripted_fixture
from refaudit.utils.error_handler import ConfigError, SandboxUnavailableError

logger = logging.getLogger(__name__)

OUTPUT_LIMIT = 20000
SCRUBBED_ENV = ("REFAUDIT_API_KEY", "REFAUDIT_FALLBACK_API_KEY", "OPENAI_API_KEY", "AWS_SECRET_ACCESS_KEY")


class SandboxExecutor(ABC):
    """Runs one script against a read-only checkout"""
    mode = "off"

    @abstractmethod
    async def run(self, script: str, checkout_root: Path) -> SandboxResult:
        """Execute a Python script with the checkout mounted read-only"""


class ContainerSandbox(SandboxExecutor):
    """
    docker-backed executor: no network, memory/cpu/pid limits, read-only root and checkout,
    script mounted from a throwaway directory
    """
    mode = "container"

    def __init__(self, image: str = "python:3.11-slim", timeout_s: float = 120.0, memory_mb: int = 1024,
                 docker_binary: str = "docker"):
        self.image = image
        self.timeout_s = timeout_s
        self.memory_mb = memory_mb
        self.docker_binary = docker_binary

    def ensure_available(self) -> str:
        binary = shutil.which(self.docker_binary)
        if binary is None:
            raise SandboxUnavailableError(f"Container runtime {self.docker_binary!r} not found on PATH")
        return binary

    def command(self, binary: str, script_dir: Path, checkout_root: Path) -> List[str]:
        return [
            binary, "run", "--rm",
            "--network", "none",
            "--memory", f"{self.memory_mb}m",
            "--cpus", "1",
            "--pids-limit", "256",
            "--read-only",
            "--tmpfs", "/tmp",
            "--cap-drop", "ALL",
            "--security-opt", "no-new-privileges",
            "-v", f"{Path(checkout_root).resolve()}:/target:ro",
            "-v", f"{script_dir}:/poc:ro",
            "-w", "/target",
            "-e", "PYTHONPATH=/target",
            self.image,
            "python", "/poc/poc.py",
        ]

    async def run(self, script: str, checkout_root: Path) -> SandboxResult:
        binary = self.ensure_available()
        env = {k: v for k, v in os.environ.items() if k not in SCRUBBED_ENV}
        with tempfile.TemporaryDirectory(prefix="refaudit-poc-") as script_dir:
            (Path(script_dir) / "poc.py").write_text(script, encoding="utf-8")
            try:
                process = await asyncio.create_subprocess_exec(
                    *self.command(binary, Path(script_dir), checkout_root),
                    stdout=asyncio.subprocess.PIPE,
                    stderr=asyncio.subprocess.STDOUT,
                    env=env,
                )
            except OSError as e:
                raise SandboxUnavailableError(f"Failed to start the container runtime: {e}")
            try:
                output, _ = await asyncio.wait_for(process.communicate(), timeout=self.timeout_s)
            except asyncio.TimeoutError:
                try:
                    process.kill()
                except ProcessLookupError:
                    pass
                await process.wait()
                logger.warning(f"PoC run exceeded {self.timeout_s}s and was killed")
                return SandboxResult(exit_code=124, output="[TIMEOUT]", timed_out=True)

        text = output.decode("utf-8", errors="replace")[-OUTPUT_LIMIT:]
        return SandboxResult(exit_code=process.returncode or 0, output=text)


class FakeSandbox(SandboxExecutor):
    """In-process stand-in: records every script and replays scripted results in order"""
    mode = "fake"

    def __init__(self, results: Optional[List[SandboxResult]] = None):
        self.results = list(results or [])
        self.scripts: List[Tuple[str, Path]] = []

    async def run(self, script: str, checkout_root: Path) -> SandboxResult:
        self.scripts.append((script, Path(checkout_root)))
        if not self.results:
            return SandboxResult()
        index = min(len(self.scripts), len(self.results)) - 1
        return self.results[index]


def build_sandbox(config: RunConfig) -> Optional[SandboxExecutor]:
    """Executor for the configured sandbox mode; None when PoC runs are off"""
    if config.sandbox_mode == "off":
        return None
    if config.sandbox_mode == "fake":
        results: List[SandboxResult] = []
        if config.scripted_fixture is not None:
            results = load_scripted_fixture(config.scripted_fixture).sandbox
        return FakeSandbox(results)
    if config.sandbox_mode == "container":
        return ContainerSandbox(config.sandbox_image, config.sandbox_timeout_s, config.sandbox_memory_mb)
    raise ConfigError(f"Unknown sandbox mode: {config.sandbox_mode}")
