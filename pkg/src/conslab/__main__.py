import sys

from conslab.cli import main

sys.exit(main())
