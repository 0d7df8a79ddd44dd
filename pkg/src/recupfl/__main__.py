import sys

from recupfl.harness.cli import main

sys.exit(main())
