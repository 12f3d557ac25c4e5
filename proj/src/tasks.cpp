// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#include "grpolab/tasks.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "grpolab/errors.hpp"
#include "grpolab/rng.hpp"

namespace grpolab {

using nlohmann::json;

namespace {

constexpr char kShapes[] = {'o', 'x', '^', '#'};

std::string join_cells(const Grid& g, int row) {
    std::string out;
    for (int c = 0; c < g.cols; ++c) out += g.at(row, c);
    return out;
}

int cell_digit(const Grid& g, int r, int c) {
    return g.at(r, c)[0] - '0';
}

Task make_grid_arithmetic(Rng& rng, int difficulty) {
    Task t;
    t.family = TaskFamily::grid_arithmetic;
    t.difficulty = difficulty;
    if (difficulty <= 1) {
        // <= 4 cells, digits small enough that the sum stays a single digit.
        const int k = rng.uniform_int(2, 4);
        const int cap = (k == 2) ? 4 : 2;
        t.image.rows = 1;
        t.image.cols = k;
        int sum = 0;
        for (int i = 0; i < k; ++i) {
            const int d = rng.uniform_int(0, cap);
            sum += d;
            t.image.cells.push_back(std::string(1, static_cast<char>('0' + d)));
        }
        t.prompt = "Add all cells.";
        t.ground_truth = std::to_string(sum);
    } else {
        const int rows = 2, cols = 3;
        t.image.rows = rows;
        t.image.cols = cols;
        for (int i = 0; i < rows * cols; ++i) {
            t.image.cells.push_back(std::string(1, static_cast<char>('0' + rng.uniform_int(0, 3))));
        }
        const int row = rng.uniform_int(1, rows);
        int sum = 0;
        for (int c = 0; c < cols; ++c) sum += cell_digit(t.image, row - 1, c);
        t.prompt = "Add row " + std::to_string(row) + ".";
        t.ground_truth = std::to_string(sum);
    }
    return t;
}

Task make_chart_read(Rng& rng, int difficulty) {
    Task t;
    t.family = TaskFamily::chart_read;
    t.difficulty = difficulty;
    const int k = rng.uniform_int(3, difficulty <= 1 ? 4 : 5);
    t.image.rows = 1;
    t.image.cols = k;
    for (int i = 0; i < k; ++i) {
        t.image.cells.push_back(std::string(1, static_cast<char>('0' + rng.uniform_int(0, 9))));
    }
    if (difficulty <= 1) {
        const int which = rng.uniform_int(1, k);
        t.prompt = "Height of bar " + std::to_string(which) + "?";
        t.ground_truth = t.image.at(0, which - 1);
    } else {
        // unique maximum so the answer is well defined
        for (;;) {
            int best = 0, ties = 0;
            for (int i = 0; i < k; ++i) {
                const int h = cell_digit(t.image, 0, i);
                if (h > cell_digit(t.image, 0, best)) { best = i; ties = 0; }
                else if (i != best && h == cell_digit(t.image, 0, best)) ++ties;
            }
            if (ties == 0) {
                t.prompt = "Which bar is tallest?";
                t.ground_truth = std::to_string(best + 1);
                break;
            }
            const int bump = rng.uniform_int(0, k - 1);
            t.image.cells[static_cast<size_t>(bump)] =
                std::string(1, static_cast<char>('0' + rng.uniform_int(0, 9)));
        }
    }
    return t;
}

Task make_geometry_count(Rng& rng, int difficulty) {
    Task t;
    t.family = TaskFamily::geometry_count;
    t.difficulty = difficulty;
    const int rows = difficulty <= 1 ? 2 : 3;
    const int cols = 3;
    t.image.rows = rows;
    t.image.cols = cols;
    for (int i = 0; i < rows * cols; ++i) {
        t.image.cells.push_back(std::string(1, kShapes[rng.uniform_int(0, 3)]));
    }
    const char target = kShapes[rng.uniform_int(0, 3)];
    int count = 0;
    for (const auto& c : t.image.cells) {
        if (c[0] == target) ++count;
    }
    t.prompt = std::string("How many ") + target + " shapes?";
    t.ground_truth = std::to_string(count);
    return t;
}

} // namespace

const char* family_name(TaskFamily f) {
    switch (f) {
        case TaskFamily::grid_arithmetic: return "grid-arithmetic";
        case TaskFamily::chart_read: return "chart-read";
        case TaskFamily::geometry_count: return "geometry-count";
    }
    return "unknown";
}

TaskFamily family_from_name(std::string_view name) {
    if (name == "grid-arithmetic") return TaskFamily::grid_arithmetic;
    if (name == "chart-read") return TaskFamily::chart_read;
    if (name == "geometry-count") return TaskFamily::geometry_count;
    throw ConfigError("unknown task family: " + std::string(name));
}

TaskSet generate_taskset(const FamilyMix& mix, int count, uint64_t seed,
                         int difficulty_lo, int difficulty_hi, std::string split) {
    if (count < 1) throw ConfigError("generate_taskset: count must be >= 1");
    if (mix.weights.empty()) throw ConfigError("generate_taskset: empty family mix");
    if (difficulty_lo < 1 || difficulty_hi < difficulty_lo) {
        throw ConfigError("generate_taskset: bad difficulty range");
    }
    double total = 0.0;
    for (const auto& [fam, w] : mix.weights) {
        if (w < 0.0) throw ConfigError("generate_taskset: negative family weight");
        total += w;
    }
    if (total <= 0.0) throw ConfigError("generate_taskset: zero-weight family mix");

    TaskSet ts;
    ts.split = std::move(split);
    ts.seed = seed;
    ts.tasks.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        Rng rng(derive_seed(seed, static_cast<uint64_t>(i)));
        const double draw = rng.uniform01() * total;
        double acc = 0.0;
        TaskFamily fam = mix.weights.begin()->first;
        for (const auto& [f, w] : mix.weights) {
            acc += w;
            if (draw < acc) { fam = f; break; }
            fam = f;
        }
        const int difficulty = rng.uniform_int(difficulty_lo, difficulty_hi);
        Task t;
        switch (fam) {
            case TaskFamily::grid_arithmetic: t = make_grid_arithmetic(rng, difficulty); break;
            case TaskFamily::chart_read: t = make_chart_read(rng, difficulty); break;
            case TaskFamily::geometry_count: t = make_geometry_count(rng, difficulty); break;
        }
        std::ostringstream id;
        id << ts.split << "-" << std::setw(6) << std::setfill('0') << i;
        t.id = id.str();
        ts.tasks.push_back(std::move(t));
    }
    return ts;
}

std::string render_text(const Task& task) {
    std::string out = task.prompt;
    out += "\nimg ";
    out += std::to_string(task.image.rows);
    out += "x";
    out += std::to_string(task.image.cols);
    out += ":";
    for (int r = 0; r < task.image.rows; ++r) {
        out += (r == 0) ? " " : ";";
        out += join_cells(task.image, r);
    }
    out += "\n";
    return out;
}

std::vector<int> render_context(const Task& task, const Vocab& vocab, int max_len) {
    std::vector<int> ctx;
    ctx.push_back(vocab.bos());
    const auto body = vocab.encode(render_text(task));
    ctx.insert(ctx.end(), body.begin(), body.end());
    if (static_cast<int>(ctx.size()) > max_len) {
        throw ConfigError("render_context: task " + task.id + " needs " +
                          std::to_string(ctx.size()) + " tokens, limit " + std::to_string(max_len));
    }
    return ctx;
}

std::string describe_image(const Task& task) {
    std::string out;
    switch (task.family) {
        case TaskFamily::chart_read:
            out = "The image shows " + std::to_string(task.image.cols) + " bars of heights";
            for (int c = 0; c < task.image.cols; ++c) out += " " + task.image.at(0, c);
            out += ".";
            return out;
        case TaskFamily::grid_arithmetic:
            out = "The image is a " + std::to_string(task.image.rows) + "x" +
                  std::to_string(task.image.cols) + " grid of digits:";
            break;
        case TaskFamily::geometry_count:
            out = "The image is a " + std::to_string(task.image.rows) + "x" +
                  std::to_string(task.image.cols) + " grid of shapes:";
            break;
    }
    for (int r = 0; r < task.image.rows; ++r) {
        if (r > 0) out += ";";
        for (int c = 0; c < task.image.cols; ++c) out += " " + task.image.at(r, c);
    }
    out += ".";
    return out;
}

std::optional<std::string> extract_boxed(std::string_view text) {
    constexpr std::string_view kMarker = "\\boxed{";
    const size_t open = text.rfind(kMarker);
    if (open == std::string_view::npos) return std::nullopt;
    int depth = 1;
    for (size_t i = open + kMarker.size(); i < text.size(); ++i) {
        if (text[i] == '{') ++depth;
        else if (text[i] == '}') {
            --depth;
            if (depth == 0) {
                return std::string(text.substr(open + kMarker.size(), i - (open + kMarker.size())));
            }
        }
    }
    return std::nullopt;
}

std::string normalize_answer(std::string_view s) {
    std::string out;
    bool in_space = true; // leading whitespace dropped
    for (char ch : s) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            in_space = true;
            continue;
        }
        if (in_space && !out.empty()) out += ' ';
        in_space = false;
        out += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
    return out;
}

namespace {

// Parses a plain decimal ("-12", "3.50", "+0.125") into an exact rational.
struct Rational {
    __int128 num = 0;
    __int128 den = 1;
};

std::optional<Rational> parse_rational(std::string_view s) {
    // num and den both stay below 1e16 so cross-multiplied comparison fits
    // comfortably in __int128.
    constexpr __int128 kLimit = static_cast<__int128>(1000000000000000ll);
    Rational r;
    size_t i = 0;
    bool neg = false;
    if (i < s.size() && (s[i] == '-' || s[i] == '+')) {
        neg = (s[i] == '-');
        ++i;
    }
    bool any = false;
    for (; i < s.size() && std::isdigit(static_cast<unsigned char>(s[i])); ++i) {
        r.num = r.num * 10 + (s[i] - '0');
        any = true;
        if (r.num > kLimit) return std::nullopt;
    }
    if (i < s.size() && s[i] == '.') {
        ++i;
        for (; i < s.size() && std::isdigit(static_cast<unsigned char>(s[i])); ++i) {
            r.num = r.num * 10 + (s[i] - '0');
            r.den *= 10;
            any = true;
            if (r.num > kLimit || r.den > kLimit) return std::nullopt;
        }
    }
    if (!any || i != s.size()) return std::nullopt;
    if (neg) r.num = -r.num;
    return r;
}

} // namespace

bool answers_equal(std::string_view a, std::string_view b) {
    const std::string na = normalize_answer(a);
    const std::string nb = normalize_answer(b);
    const auto ra = parse_rational(na);
    const auto rb = parse_rational(nb);
    if (ra && rb) return ra->num * rb->den == rb->num * ra->den;
    return na == nb;
}

int verify_answer(const Task& task, const std::optional<std::string>& answer) {
    if (!answer) return 0;
    return answers_equal(*answer, task.ground_truth) ? 1 : 0;
}

namespace {

json task_to_json(const Task& t, const std::string& split) {
    json g;
    g["rows"] = t.image.rows;
    g["cols"] = t.image.cols;
    g["cells"] = t.image.cells;
    json j;
    j["id"] = t.id;
    j["family"] = family_name(t.family);
    j["difficulty"] = t.difficulty;
    j["prompt"] = t.prompt;
    j["grid"] = g;
    j["ground_truth"] = t.ground_truth;
    j["split"] = split;
    return j;
}

Task task_from_json(const json& j) {
    Task t;
    t.id = j.at("id").get<std::string>();
    t.family = family_from_name(j.at("family").get<std::string>());
    t.difficulty = j.at("difficulty").get<int>();
    t.prompt = j.at("prompt").get<std::string>();
    const auto& g = j.at("grid");
    t.image.rows = g.at("rows").get<int>();
    t.image.cols = g.at("cols").get<int>();
    t.image.cells = g.at("cells").get<std::vector<std::string>>();
    if (static_cast<int>(t.image.cells.size()) != t.image.rows * t.image.cols) {
        throw FormatError("taskset: grid shape mismatch in " + t.id);
    }
    t.ground_truth = j.at("ground_truth").get<std::string>();
    return t;
}

} // namespace

void save_taskset(const TaskSet& ts, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw FormatError("taskset: cannot open " + path + " for writing");
    json header;
    header["kind"] = "taskset";
    header["version"] = 1;
    header["split"] = ts.split;
    header["seed"] = ts.seed;
    os << header.dump() << "\n";
    for (const auto& t : ts.tasks) os << task_to_json(t, ts.split).dump() << "\n";
    if (!os) throw FormatError("taskset: write failed for " + path);
}

TaskSet load_taskset(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("taskset: cannot open " + path);
    std::string line;
    if (!std::getline(is, line)) throw FormatError("taskset: empty file " + path);
    TaskSet ts;
    try {
        const json header = json::parse(line);
        if (header.at("kind") != "taskset") throw FormatError("taskset: bad header in " + path);
        if (header.at("version").get<int>() != 1) {
            throw FormatError("taskset: unsupported version in " + path);
        }
        ts.split = header.at("split").get<std::string>();
        ts.seed = header.at("seed").get<uint64_t>();
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            ts.tasks.push_back(task_from_json(json::parse(line)));
        }
    } catch (const json::exception& e) {
        throw FormatError("taskset: parse error in " + path + ": " + e.what());
    }
    return ts;
}

uint64_t taskset_hash(const TaskSet& ts) {
    uint64_t h = fnv1a64(ts.split);
    h = mix64(h ^ ts.seed);
    for (const auto& t : ts.tasks) {
        h = mix64(h ^ fnv1a64(task_to_json(t, ts.split).dump()));
    }
    return h;
}

} // namespace grpolab
