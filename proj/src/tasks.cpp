#include "crft/tasks.hpp"

#include <istream>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

#include "crft/rng.hpp"

namespace crft {

std::string vocab::render(std::span<const int> tokens) {
    std::string out;
    for (int t : tokens) {
        if (t >= 0 && t <= 9) {
            out += static_cast<char>('0' + t);
            continue;
        }
        switch (t) {
            case kPlus: out += '+'; break;
            case kMinus: out += '-'; break;
            case kTimes: out += '*'; break;
            case kEquals: out += '='; break;
            case kStep: out += ';'; break;
            case kAnswer: out += 'A'; break;
            case kBos: out += '^'; break;
            case kEos: out += '$'; break;
            case kShotSep: out += '|'; break;
            default: out += '?'; break;
        }
    }
    return out;
}

int SegmentMap::group_of(std::size_t position, bool grouping) const {
    if (!grouping || position >= tags.size()) return 0;
    return tags[position] == SegmentTag::demonstration ? 1 : 0;
}

std::vector<int> TaskSample::teacher_input() const {
    std::vector<int> seq = prompt;
    seq.insert(seq.end(), target.begin(), target.end() - 1);
    return seq;
}

std::vector<int> TaskSample::teacher_labels() const {
    std::vector<int> labels(prompt.size() + target.size() - 1, -1);
    for (std::size_t i = 0; i < target.size(); ++i) labels[prompt.size() - 1 + i] = target[i];
    return labels;
}

SegmentMap TaskSample::teacher_segments() const {
    SegmentMap m;
    m.tags.assign(segments.tags.begin(), segments.tags.end() - 1);
    return m;
}

namespace {

struct Expression {
    std::vector<int> operands;
    std::vector<int> operators;
};

int apply_op(int acc, int op, int value, int modulus) {
    int r = 0;
    switch (op) {
        case vocab::kPlus: r = acc + value; break;
        case vocab::kMinus: r = acc - value; break;
        case vocab::kTimes: r = acc * value; break;
        default: throw std::invalid_argument("unknown operator token " + std::to_string(op));
    }
    r %= modulus;
    return r < 0 ? r + modulus : r;
}

Expression draw_expression(Rng& rng, const ChainArithOptions& opt, int fixed_steps = 0) {
    Expression e;
    const int steps =
        fixed_steps > 0 ? fixed_steps : 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(opt.n_steps - 1)));
    e.operands.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(opt.modulus))));
    for (int s = 0; s < steps; ++s) {
        e.operators.push_back(opt.operators[rng.below(opt.operators.size())]);
        e.operands.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(opt.modulus))));
    }
    return e;
}

void append_question(std::vector<int>& out, const Expression& e) {
    out.push_back(e.operands[0]);
    for (std::size_t i = 0; i < e.operators.size(); ++i) {
        out.push_back(e.operators[i]);
        out.push_back(e.operands[i + 1]);
    }
    out.push_back(vocab::kEquals);
}

/// Returns the target tokens and writes the final answer.
std::vector<int> solve(const Expression& e, int modulus, bool cot, int& answer) {
    std::vector<int> target;
    int acc = e.operands[0];
    const std::size_t steps = e.operators.size();
    for (std::size_t i = 0; i < steps; ++i) {
        acc = apply_op(acc, e.operators[i], e.operands[i + 1], modulus);
        if (cot && i + 1 < steps) {
            target.push_back(acc);
            target.push_back(vocab::kStep);
        }
    }
    target.push_back(vocab::kAnswer);
    target.push_back(acc);
    target.push_back(vocab::kEos);
    answer = acc;
    return target;
}

}  // namespace

Split split_of(std::span<const int> operands, std::span<const int> operators) {
    std::uint64_t h = 0x51ed270b27a5f2c3ULL;
    for (int v : operands) h = Rng::derive(h, {static_cast<std::uint64_t>(v) + 1});
    h = Rng::derive(h, {0xffff});
    for (int v : operators) h = Rng::derive(h, {static_cast<std::uint64_t>(v) + 1});
    const std::uint64_t bucket = h % 10;
    if (bucket < 8) return Split::train;
    return bucket == 8 ? Split::val : Split::test;
}

Dataset gen_chain_arith(std::size_t count, const ChainArithOptions& opt, std::uint64_t seed) {
    if (count == 0) throw std::invalid_argument("gen_chain_arith: count must be positive");
    if (opt.n_steps < 2) throw std::invalid_argument("gen_chain_arith: n_steps must be at least 2");
    if (opt.modulus < 2 || opt.modulus > 10) {
        throw std::invalid_argument("gen_chain_arith: modulus must lie in [2, 10]");
    }
    if (opt.shots < 0) throw std::invalid_argument("gen_chain_arith: shots must be >= 0");
    if (opt.shot_steps != 0 && (opt.shot_steps < 2 || opt.shot_steps > opt.n_steps)) {
        throw std::invalid_argument("gen_chain_arith: shot_steps must be 0 or lie in [2, n_steps]");
    }
    if (opt.operators.empty()) throw std::invalid_argument("gen_chain_arith: no operators");
    for (int op : opt.operators) {
        if (op != vocab::kPlus && op != vocab::kMinus && op != vocab::kTimes) {
            throw std::invalid_argument("gen_chain_arith: unknown operator token " + std::to_string(op));
        }
    }
    Rng rng(Rng::derive(seed, {static_cast<std::uint64_t>(opt.split)}));
    Rng demo_rng(Rng::derive(seed, {0xde70}));
    Dataset out;
    out.reserve(count);
    while (out.size() < count) {
        Expression e = draw_expression(rng, opt);
        if (split_of(e.operands, e.operators) != opt.split) continue;

        TaskSample s;
        s.prompt.push_back(vocab::kBos);
        const SegmentTag first = opt.shots > 0 ? SegmentTag::demonstration : SegmentTag::question;
        s.segments.tags.push_back(first);
        for (int shot = 0; shot < opt.shots; ++shot) {
            Expression demo;
            do {
                demo = draw_expression(demo_rng, opt, opt.shot_steps);
            } while (split_of(demo.operands, demo.operators) != Split::train);
            int demo_answer = 0;
            std::vector<int> demo_target = solve(demo, opt.modulus, opt.cot, demo_answer);
            demo_target.back() = vocab::kShotSep;
            append_question(s.prompt, demo);
            s.prompt.insert(s.prompt.end(), demo_target.begin(), demo_target.end());
        }
        s.segments.tags.resize(s.prompt.size(), SegmentTag::demonstration);
        append_question(s.prompt, e);
        s.segments.tags.resize(s.prompt.size(), SegmentTag::question);
        s.target = solve(e, opt.modulus, opt.cot, s.answer);
        s.segments.tags.resize(s.prompt.size() + s.target.size(), SegmentTag::answer);
        s.steps = static_cast<int>(e.operators.size());
        out.push_back(std::move(s));
    }
    return out;
}

int evaluate_expression(std::span<const int> prompt, int modulus) {
    // The final question starts after the last BOS or demonstration separator.
    std::size_t start = 0;
    for (std::size_t i = 0; i < prompt.size(); ++i) {
        if (prompt[i] == vocab::kBos || prompt[i] == vocab::kShotSep) start = i + 1;
    }
    if (start >= prompt.size()) throw std::invalid_argument("prompt has no question");
    int acc = prompt[start];
    std::size_t i = start + 1;
    while (i + 1 < prompt.size() && prompt[i] != vocab::kEquals) {
        acc = apply_op(acc, prompt[i], prompt[i + 1], modulus);
        i += 2;
    }
    return acc;
}

std::vector<int> extract_answer(std::span<const int> generated) {
    std::size_t start = generated.size();
    for (std::size_t i = 0; i < generated.size(); ++i) {
        if (generated[i] == vocab::kAnswer) start = i + 1;
    }
    std::vector<int> out;
    for (std::size_t i = start; i < generated.size() && generated[i] != vocab::kEos; ++i) {
        out.push_back(generated[i]);
    }
    return out;
}

bool answer_matches(std::span<const int> generated, int answer) {
    const auto span = extract_answer(generated);
    return span.size() == 1 && span[0] == answer;
}

namespace {

std::string_view tag_name(SegmentTag t) {
    switch (t) {
        case SegmentTag::demonstration: return "demonstration";
        case SegmentTag::question: return "question";
        case SegmentTag::answer: return "answer";
    }
    return "?";
}

SegmentTag parse_tag(const std::string& s) {
    if (s == "demonstration") return SegmentTag::demonstration;
    if (s == "question") return SegmentTag::question;
    if (s == "answer") return SegmentTag::answer;
    throw std::runtime_error("unknown segment tag '" + s + "'");
}

}  // namespace

void write_dataset(std::ostream& out, const Dataset& data) {
    for (const auto& s : data) {
        nlohmann::ordered_json rec;
        rec["schema"] = kDatasetSchema;
        rec["prompt"] = s.prompt;
        rec["target"] = s.target;
        nlohmann::ordered_json segs = nlohmann::ordered_json::array();
        std::size_t begin = 0;
        for (std::size_t i = 1; i <= s.segments.tags.size(); ++i) {
            if (i == s.segments.tags.size() || s.segments.tags[i] != s.segments.tags[begin]) {
                segs.push_back({tag_name(s.segments.tags[begin]), begin, i});
                begin = i;
            }
        }
        rec["segments"] = segs;
        rec["answer"] = s.answer;
        rec["steps"] = s.steps;
        out << rec.dump() << '\n';
    }
}

Dataset read_dataset(std::istream& in) {
    Dataset data;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto rec = nlohmann::json::parse(line);
            if (rec.at("schema").get<int>() != kDatasetSchema) {
                throw std::runtime_error("unsupported dataset schema " + rec.at("schema").dump());
            }
            TaskSample s;
            s.prompt = rec.at("prompt").get<std::vector<int>>();
            s.target = rec.at("target").get<std::vector<int>>();
            s.answer = rec.at("answer").get<int>();
            s.steps = rec.value("steps", 0);
            s.segments.tags.resize(s.total_length(), SegmentTag::question);
            std::size_t covered = 0;
            for (const auto& seg : rec.at("segments")) {
                const auto tag = parse_tag(seg.at(0).get<std::string>());
                const auto begin = seg.at(1).get<std::size_t>();
                const auto end = seg.at(2).get<std::size_t>();
                if (begin != covered || end > s.total_length() || end <= begin) {
                    throw std::runtime_error("segments do not partition the sequence");
                }
                for (std::size_t i = begin; i < end; ++i) s.segments.tags[i] = tag;
                covered = end;
            }
            if (covered != s.total_length()) throw std::runtime_error("segments do not cover the sequence");
            data.push_back(std::move(s));
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("dataset line " + std::to_string(line_no) + ": " + e.what());
        } catch (const std::runtime_error& e) {
            throw std::runtime_error("dataset line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return data;
}

}  // namespace crft
