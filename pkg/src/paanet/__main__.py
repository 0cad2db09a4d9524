import sys

from paanet.cli import main

sys.exit(main())
