"""領域候補によるズームイン推論"""
