"""Rotorguard command-line entrypoint."""

import logging
import os

from rotorguard import settings

logging.basicConfig(
    level=getattr(logging, settings.log_level(), logging.INFO),
    format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S",
)

logger = logging.getLogger("rotorguard")


def main():
    output_dir = settings.output_dir()
    logger.info("Rotorguard output directory: %s", output_dir)

    # Results and the run ledger go here; fail early if it cannot be written
    os.makedirs(output_dir, exist_ok=True)
    if not os.access(output_dir, os.W_OK):
        logger.error(
            "Output directory %s is not writable by UID %d. Fix permissions with: chown %d:%d %s",
            output_dir, os.getuid(), os.getuid(), os.getgid(), output_dir,
        )
        raise SystemExit(1)

    from rotorguard.cli import main as cli_main

    raise SystemExit(cli_main())


if __name__ == "__main__":
    main()
