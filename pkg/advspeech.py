#!/usr/bin/env python3
"""
advspeech - Adversarial speech examples: generation, datasets and detection
Main entry point for the application
"""

import logging
import sys
from pathlib import Path

from src.cli import main as cli_main


def setup_logging(log_dir: Path, verbose: bool = False) -> logging.Logger:
    """Setup logging for the application"""
    log_dir.mkdir(parents=True, exist_ok=True)

    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_dir / "advspeech.log"),
            logging.StreamHandler()
        ]
    )

    return logging.getLogger("advspeech")


def main():
    """Main entry point"""
    try:
        code = cli_main(sys.argv[1:], setup_logging=setup_logging)
    except KeyboardInterrupt:
        logging.getLogger("advspeech").info("Keyboard interrupt received.")
        code = 130
    sys.exit(code)


if __name__ == "__main__":
    main()
