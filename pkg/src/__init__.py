# 量化模型遗忘实验 (Q-MUL)
