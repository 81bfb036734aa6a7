import sys

from stfde.cli import main

sys.exit(main())
