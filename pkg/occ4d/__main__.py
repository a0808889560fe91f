from occ4d.main import main

main()
