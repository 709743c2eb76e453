"""Factory classes for dynamic instantiation of backends and attributors."""

import importlib
from typing import TYPE_CHECKING, Any

from loguru import logger

from rethink_rm.errors import ConfigError
from rethink_rm.model import AttributorKind, BackendKind, EngineConfig

if TYPE_CHECKING:
    from rethink_rm.backends import Backend
    from rethink_rm.diffusion import Attributor
    from rethink_rm.orchestrator import RolloutOrchestrator

BACKEND_CLASSES: dict[BackendKind, str] = {
    BackendKind.TOY: "rethink_rm.backends.ToyBackend",
    BackendKind.REMOTE: "rethink_rm.backends.RemoteBackend",
}

ATTRIBUTOR_CLASSES: dict[AttributorKind, str] = {
    AttributorKind.LEXICON: "rethink_rm.diffusion.LexiconAttributor",
    AttributorKind.EXTERNAL_JUDGE: "rethink_rm.diffusion.JudgeAttributor",
}


class FactoryBase:
    """
    Shared loader for the backend and attributor factories.

    Both are configured by kind or by a dotted class path, so a custom
    `Backend` or `Attributor` can be plugged in without touching this package.
    """

    def instantiate(self, class_name: str, *args, **kwargs) -> Any:  # noqa: ANN002, ANN003, ANN401
        """
        Import `class_name` and construct it.

        Args:
            class_name: Dotted path of a `Backend` or `Attributor` subclass,
              e.g. "rethink_rm.backends.ToyBackend".
            *args: Constructor arguments, normally the engine config first.
            **kwargs: Constructor keyword arguments.

        Returns:
            The new backend or attributor.

        Raises:
            ConfigError: If `class_name` is not dotted or cannot be imported.
        """
        logger.info("Loading {class_name}", class_name=class_name)
        module_name, _, attr = class_name.rpartition(".")
        if not module_name:
            msg = f"Expected a fully qualified class name, got {class_name!r}."
            raise ConfigError(msg)

        try:
            module = importlib.import_module(module_name)
            class_ = getattr(module, attr)
        except (ImportError, AttributeError) as e:
            msg = f"Cannot load class {class_name}: {e}"
            raise ConfigError(msg) from e
        return class_(*args, **kwargs)


class BackendFactory(FactoryBase):
    """Factory class to instantiate generation `Backend`s."""

    def __init__(self, config: EngineConfig) -> None:
        """
        Instantiate the `BackendFactory`.

        Args:
          config: The engine configuration. `backend.class_path`, when set,
            wins over the class mapped from `backend.kind`.
        """
        self.config = config

    def build(self, **kwargs: Any) -> "Backend":  # noqa: ANN401
        """
        Build the configured `Backend`.

        Args:
          **kwargs: Extra keyword arguments for the backend constructor.

        Returns:
          A `Backend` instance.
        """
        backend = self.config.backend
        class_path = backend.class_path or BACKEND_CLASSES[backend.kind]
        logger.info(
            "Building backend of kind {kind} from {class_path}",
            kind=backend.kind,
            class_path=class_path,
        )
        return self.instantiate(class_path, self.config, **kwargs)


class AttributorFactory(FactoryBase):
    """Factory class to instantiate sentence `Attributor`s."""

    def __init__(self, config: EngineConfig) -> None:
        """
        Instantiate the `AttributorFactory`.

        Args:
          config: The engine configuration; `analyzer.attributor` picks the class.
        """
        self.config = config

    def build(self, orchestrator: "RolloutOrchestrator | None" = None) -> "Attributor":
        """
        Build the configured `Attributor`.

        Args:
          orchestrator: Generation path for attributors that ask a model.

        Returns:
          An `Attributor` instance.

        Raises:
          ConfigError: If the attributor needs an orchestrator and none is given.
        """
        kind = self.config.analyzer.attributor
        if kind == AttributorKind.EXTERNAL_JUDGE and orchestrator is None:
            msg = "The external_judge attributor needs a generation backend."
            raise ConfigError(msg)

        logger.info("Building attributor of kind {kind}", kind=kind)
        return self.instantiate(ATTRIBUTOR_CLASSES[kind], self.config, orchestrator)
