import sys

from kmig.cli import main

sys.exit(main())
