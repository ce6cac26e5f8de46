//! Bundled demo programs and the benchmark corpus.

use crate::guest::{Granularity, Program, ProgramError};

pub struct Demo {
    pub name: &'static str,
    pub path: &'static str,
    pub source: &'static str,
}

pub const BINARY_SEARCH: Demo =
    Demo { name: "binary_search", path: "binary_search.trk", source: include_str!("../demos/binary_search.trk") };
pub const MOVE_PLAYER: Demo =
    Demo { name: "move_player", path: "move_player.trk", source: include_str!("../demos/move_player.trk") };
pub const MAIN_LOOP: Demo = Demo { name: "main_loop", path: "main_loop.trk", source: include_str!("../demos/main_loop.trk") };
pub const FLAPPY: Demo = Demo { name: "flappy", path: "flappy.trk", source: include_str!("../demos/flappy.trk") };

/// Scripted `get_events` results for 400 flappy frames.
pub const FLAPPY_EVENTS: &str = include_str!("../demos/flappy_events.jsonl");
pub const FLAPPY_SEED: u64 = 7;

pub const ALL: [Demo; 4] = [BINARY_SEARCH, MOVE_PLAYER, MAIN_LOOP, FLAPPY];

impl Demo {
    pub fn program(&self) -> Program {
        Program::from_source(self.source, self.path).expect("bundled demos parse")
    }
}

pub fn by_name(name: &str) -> Option<Demo> {
    ALL.into_iter().find(|d| d.name == name)
}

const PRAGMA: &str = "@monitor(granularity=\"GRAN\")";

/// Small compute-bound programs. Each has one function preceded by a
/// `PRAGMA` line and a top-level loop that calls it.
const CORPUS: [(&str, &str); 20] = [
    (
        "fib",
        r#"PRAGMA
def fib(n):
    a = 0
    b = 1
    for i in range(n):
        t = a + b
        a = b
        b = t
    return a

k = 0
while k < 200:
    fib(40)
    k = k + 1
"#,
    ),
    (
        "factorial",
        r#"PRAGMA
def fact(n):
    acc = 1
    while n > 1:
        acc = acc * n
        n = n - 1
    return acc

k = 0
while k < 300:
    fact(20)
    k = k + 1
"#,
    ),
    (
        "sum_squares",
        r#"PRAGMA
def sum_squares(n):
    total = 0
    for i in range(n):
        total = total + i * i
    return total

k = 0
while k < 200:
    sum_squares(50)
    k = k + 1
"#,
    ),
    (
        "bubble_sort",
        r#"PRAGMA
def bubble(items):
    n = len(items)
    for i in range(n):
        for j in range(n - i - 1):
            if items[j] > items[j + 1]:
                t = items[j]
                items[j] = items[j + 1]
                items[j + 1] = t
    return items

k = 0
while k < 40:
    bubble([9, 3, 7, 1, 8, 2, 6, 4, 5, 0])
    k = k + 1
"#,
    ),
    (
        "binary_search",
        r#"PRAGMA
def search(arr, target):
    lo = 0
    hi = len(arr) - 1
    while lo <= hi:
        mid = (lo + hi) // 2
        if arr[mid] == target:
            return mid
        elif arr[mid] < target:
            lo = mid + 1
        else:
            hi = mid - 1
    return -1

data = range(64)
k = 0
while k < 400:
    search(data, k % 70)
    k = k + 1
"#,
    ),
    (
        "gcd",
        r#"PRAGMA
def gcd(a, b):
    while b != 0:
        t = b
        b = a % b
        a = t
    return a

k = 1
while k < 400:
    gcd(k * 7919, 104729)
    k = k + 1
"#,
    ),
    (
        "sieve",
        r#"PRAGMA
def sieve(n):
    flags = []
    for i in range(n):
        append(flags, true)
    count = 0
    p = 2
    while p < n:
        if flags[p]:
            count = count + 1
            m = p * p
            while m < n:
                flags[m] = false
                m = m + p
        p = p + 1
    return count

k = 0
while k < 10:
    sieve(200)
    k = k + 1
"#,
    ),
    (
        "collatz",
        r#"PRAGMA
def collatz(n):
    steps = 0
    while n != 1:
        if n % 2 == 0:
            n = n // 2
        else:
            n = 3 * n + 1
        steps = steps + 1
    return steps

k = 1
while k < 100:
    collatz(k)
    k = k + 1
"#,
    ),
    (
        "string_build",
        r#"PRAGMA
def build(n):
    s = ""
    for i in range(n):
        s = s + str(i % 10)
    return len(s)

k = 0
while k < 200:
    build(30)
    k = k + 1
"#,
    ),
    (
        "word_count",
        r#"PRAGMA
def count_words(words):
    counts = {}
    for w in words:
        if w in counts:
            counts[w] = counts[w] + 1
        else:
            counts[w] = 1
    return len(keys(counts))

text = ["a", "b", "a", "c", "b", "a", "d", "e", "a", "c"]
k = 0
while k < 200:
    count_words(text)
    k = k + 1
"#,
    ),
    (
        "matmul",
        r#"PRAGMA
def matmul(a, b, n):
    out = []
    for i in range(n):
        row = []
        for j in range(n):
            s = 0
            for x in range(n):
                s = s + a[i][x] * b[x][j]
            append(row, s)
        append(out, row)
    return out

m = [[1, 2, 3, 4], [5, 6, 7, 8], [9, 10, 11, 12], [13, 14, 15, 16]]
k = 0
while k < 20:
    matmul(m, m, 4)
    k = k + 1
"#,
    ),
    (
        "fizzbuzz",
        r#"PRAGMA
def fizzbuzz(n):
    hits = 0
    for i in range(n):
        if i % 15 == 0:
            hits = hits + 2
        elif i % 3 == 0 or i % 5 == 0:
            hits = hits + 1
    return hits

k = 0
while k < 100:
    fizzbuzz(60)
    k = k + 1
"#,
    ),
    (
        "reverse",
        r#"PRAGMA
def reverse(items):
    out = []
    i = len(items) - 1
    while i >= 0:
        append(out, items[i])
        i = i - 1
    return out

data = range(40)
k = 0
while k < 100:
    reverse(data)
    k = k + 1
"#,
    ),
    (
        "max_subarray",
        r#"PRAGMA
def max_subarray(xs):
    best = xs[0]
    cur = 0
    for x in xs:
        cur = max(x, cur + x)
        best = max(best, cur)
    return best

data = [3, -4, 5, -1, 2, -6, 4, 1, -2, 3, -5, 6, -1, 2, -3, 4]
k = 0
while k < 200:
    max_subarray(data)
    k = k + 1
"#,
    ),
    (
        "running_mean",
        r#"PRAGMA
def running_mean(n):
    mean = 0.0
    for i in range(n):
        mean = mean + (i * 1.5 - mean) / (i + 1)
    return mean

k = 0
while k < 200:
    running_mean(40)
    k = k + 1
"#,
    ),
    (
        "power_mod",
        r#"PRAGMA
def power_mod(b, e, m):
    result = 1
    b = b % m
    while e > 0:
        if e % 2 == 1:
            result = result * b % m
        e = e // 2
        b = b * b % m
    return result

k = 0
while k < 400:
    power_mod(k + 2, 1000003, 1000007)
    k = k + 1
"#,
    ),
    (
        "palindrome",
        r#"PRAGMA
def is_palindrome(xs):
    i = 0
    j = len(xs) - 1
    ok = true
    while i < j:
        if xs[i] != xs[j]:
            ok = false
        i = i + 1
        j = j - 1
    return ok

word = [1, 2, 3, 4, 5, 6, 5, 4, 3, 2, 1]
k = 0
while k < 300:
    is_palindrome(word)
    k = k + 1
"#,
    ),
    (
        "histogram",
        r#"PRAGMA
def histogram(xs, buckets):
    h = []
    for i in range(buckets):
        append(h, 0)
    for x in xs:
        b = x % buckets
        h[b] = h[b] + 1
    return h

data = range(50)
k = 0
while k < 100:
    histogram(data, 7)
    k = k + 1
"#,
    ),
    (
        "stack_machine",
        r#"PRAGMA
def run_stack(ops):
    stack = []
    for op in ops:
        if op == "add":
            b = pop(stack)
            a = pop(stack)
            append(stack, a + b)
        elif op == "mul":
            b = pop(stack)
            a = pop(stack)
            append(stack, a * b)
        else:
            append(stack, op)
    return stack[0]

prog = [2, 3, "add", 4, "mul", 5, "add", 6, "mul", 7, "add"]
k = 0
while k < 200:
    run_stack(prog)
    k = k + 1
"#,
    ),
    (
        "pascal",
        r#"PRAGMA
def pascal_row(n):
    row = [1]
    for i in range(n):
        nxt = [1]
        for j in range(len(row) - 1):
            append(nxt, row[j] + row[j + 1])
        append(nxt, 1)
        row = nxt
    return row

k = 0
while k < 30:
    pascal_row(15)
    k = k + 1
"#,
    ),
];

pub fn corpus_names() -> impl Iterator<Item = &'static str> {
    CORPUS.iter().map(|(n, _)| *n)
}

pub fn corpus_len() -> usize {
    CORPUS.len()
}

/// Source of corpus program `i`, monitored at `granularity` or with the
/// pragma line left blank (so line numbers do not shift).
pub fn corpus_source(i: usize, granularity: Option<Granularity>) -> String {
    let pragma = match granularity {
        Some(Granularity::Function) => PRAGMA.replace("GRAN", "function"),
        Some(Granularity::Line) => PRAGMA.replace("GRAN", "line"),
        None => String::new(),
    };
    CORPUS[i].1.replacen("PRAGMA", &pragma, 1)
}

pub fn corpus_program(i: usize, granularity: Option<Granularity>) -> Result<Program, ProgramError> {
    Program::from_source(&corpus_source(i, granularity), &format!("{}.trk", CORPUS[i].0))
}
