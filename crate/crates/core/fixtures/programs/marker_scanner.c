/* Looks for files and processes left by other jobs. */
#define _DEFAULT_SOURCE
#include <dirent.h>
#include <stdio.h>
#include <string.h>
#include <unistd.h>

static int scan_dir(const char *path, int depth) {
    DIR *d = opendir(path);
    if (!d)
        return 0;
    int found = 0;
    struct dirent *e;
    while ((e = readdir(d))) {
        if (!strcmp(e->d_name, ".") || !strcmp(e->d_name, ".."))
            continue;
        if (strstr(e->d_name, "isolation-marker"))
            found = 1;
        if (depth > 0 && e->d_type == DT_DIR) {
            char sub[4096];
            snprintf(sub, sizeof sub, "%s/%s", path, e->d_name);
            found |= scan_dir(sub, depth - 1);
        }
    }
    closedir(d);
    return found;
}

int main(int argc, char **argv) {
    const char *root = argc > 1 ? argv[1] : "..";
    int files = scan_dir(root, 2);
    int procs = 0;
    DIR *d = opendir("/proc");
    struct dirent *e;
    while (d && (e = readdir(d)))
        if (e->d_name[0] >= '0' && e->d_name[0] <= '9')
            procs++;
    if (d)
        closedir(d);
    printf("marker=%d processes=%d\n", files, procs);
    return 0;
}
