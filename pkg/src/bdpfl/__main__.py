import sys

from bdpfl.cli import main

sys.exit(main())
