import sys

from lossep.cli import main

sys.exit(main())
