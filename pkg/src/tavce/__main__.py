from tavce.cli import main_exit

main_exit()
