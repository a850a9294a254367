#include <stdio.h>

int main(void) {
    int n, x, best;
    if (scanf("%d", &n) != 1 || n < 1)
        return 1;
    scanf("%d", &best);
    for (int i = 1; i < n; i++) {
        scanf("%d", &x);
        if (x > best)
            best = x;
    }
    printf("%d\n", best);
    return 0;
}
