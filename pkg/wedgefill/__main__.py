import sys

from wedgefill.main import main

sys.exit(main())
