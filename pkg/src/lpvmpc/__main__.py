import sys

from lpvmpc.cli import main

if __name__ == "__main__":
    sys.exit(main())
