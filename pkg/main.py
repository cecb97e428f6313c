import logging
import sys

from abunet.cli import main as cli_main

logger = logging.getLogger(__name__)


def main():
    try:
        return cli_main()
    except Exception as e:
        logger.error(f"abunet failed: {str(e)}")
        raise


if __name__ == "__main__":
    sys.exit(main())
