#pragma once

// String-matching protocol shared by evaluation, preference-pair building
// and corpus validation: answer extraction from generated text, normalized
// comparison against targets, and the CoT well-formedness check.
//
// Extraction rules:
//   multiple choice -- last standalone occurrence of a valid label, either
//                      bare ("A".."E", case-insensitive) or with a closing
//                      parenthesis ("A)".."E)").
//   numeric         -- last standalone number; "11", "11.0" and "+11"
//                      all normalize to the same value.
// "Standalone" means delimited by non-alphanumeric characters, so the "A"
// in "Apple" or the "1" in "11" never match.

#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <optional>
#include <string>
#include <string_view>

#include "util.hpp"

namespace selfrefine {

enum class TaskKind { multiple_choice, numeric };

inline bool is_word_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) != 0;
}

// Exact-value numeric normalization: strips sign/leading zeros and trailing
// fractional zeros so "011.50" -> "11.5" and "14.0" -> "14".
inline std::optional<std::string> normalize_number(std::string_view s) {
    std::string_view v = s;
    bool negative = false;
    if (!v.empty() && (v[0] == '+' || v[0] == '-')) {
        negative = v[0] == '-';
        v.remove_prefix(1);
    }
    if (v.empty()) return std::nullopt;
    std::string intpart, fracpart;
    size_t i = 0;
    while (i < v.size() && std::isdigit(static_cast<unsigned char>(v[i]))) intpart += v[i++];
    if (i < v.size() && v[i] == '.') {
        ++i;
        while (i < v.size() && std::isdigit(static_cast<unsigned char>(v[i]))) fracpart += v[i++];
    }
    if (i != v.size() || intpart.empty()) return std::nullopt;
    while (intpart.size() > 1 && intpart[0] == '0') intpart.erase(intpart.begin());
    while (!fracpart.empty() && fracpart.back() == '0') fracpart.pop_back();
    if (negative && !(intpart == "0" && fracpart.empty())) intpart.insert(intpart.begin(), '-');
    return fracpart.empty() ? intpart : intpart + "." + fracpart;
}

// Normalized form used for correctness comparison: labels fold to one
// upper-case letter, numbers to their canonical value string.
inline std::string normalize_target(std::string_view target, TaskKind kind) {
    if (kind == TaskKind::multiple_choice) {
        std::string t = trim(target);
        if (!t.empty() && t.back() == ')') t.pop_back();
        t = trim(t);
        if (t.size() == 1 && t[0] >= 'a' && t[0] <= 'z') t[0] = static_cast<char>(t[0] - 'a' + 'A');
        return t;
    }
    if (auto n = normalize_number(trim(target))) return *n;
    return std::string(trim(target));
}

namespace detail {

// Scans text right-to-left for the last standalone label in [A..max_label].
inline std::optional<std::string> last_label(std::string_view text, char max_label) {
    for (size_t pos = text.size(); pos-- > 0;) {
        char c = text[pos];
        if (c >= 'a' && c <= 'e') c = static_cast<char>(c - 'a' + 'A');
        if (c < 'A' || c > max_label) continue;
        const bool left_ok = pos == 0 || !is_word_char(text[pos - 1]);
        if (!left_ok) continue;
        // bare label: next char must not be alphanumeric; "A)" also accepted
        const size_t next = pos + 1;
        if (next >= text.size() || !is_word_char(text[next])) return std::string(1, c);
    }
    return std::nullopt;
}

inline std::optional<std::string> last_number(std::string_view text) {
    for (size_t pos = text.size(); pos-- > 0;) {
        if (!std::isdigit(static_cast<unsigned char>(text[pos]))) continue;
        // expand to full digit run, then optional fraction / sign around it
        size_t end = pos + 1;
        size_t begin = pos;
        while (begin > 0 && std::isdigit(static_cast<unsigned char>(text[begin - 1]))) --begin;
        // part of a fraction like "3.14"? jump to its integer part
        if (begin >= 2 && text[begin - 1] == '.' &&
            std::isdigit(static_cast<unsigned char>(text[begin - 2]))) {
            begin -= 2;
            while (begin > 0 && std::isdigit(static_cast<unsigned char>(text[begin - 1]))) --begin;
        }
        while (end < text.size() && std::isdigit(static_cast<unsigned char>(text[end]))) ++end;
        if (end < text.size() && text[end] == '.' && end + 1 < text.size() &&
            std::isdigit(static_cast<unsigned char>(text[end + 1]))) {
            ++end;
            while (end < text.size() && std::isdigit(static_cast<unsigned char>(text[end]))) ++end;
        }
        size_t sign = begin;
        if (sign > 0 && (text[sign - 1] == '-' || text[sign - 1] == '+')) {
            const bool sign_isolated = sign - 1 == 0 || !is_word_char(text[sign - 2]);
            // "3-2" is two numbers, "x = -2" carries the sign
            if (sign_isolated) --sign;
        }
        const bool left_ok = sign == 0 || !is_word_char(text[sign - 1]);
        const bool right_ok = end >= text.size() || !is_word_char(text[end]);
        if (left_ok && right_ok) return normalize_number(text.substr(sign, end - sign))
                                          .value_or(std::string());
        pos = begin == 0 ? 0 : begin;  // skip the rest of this run
        if (begin == 0) break;
    }
    return std::nullopt;
}

}  // namespace detail

// Answer extraction over the whole generated text. max_label limits the
// accepted letters to the task's answer space ('A' + n_choices - 1).
inline std::optional<std::string> extract_answer_text(std::string_view generated, TaskKind kind,
                                                      int n_choices = 5) {
    if (kind == TaskKind::multiple_choice) {
        const char max_label = static_cast<char>('A' + std::max(1, std::min(n_choices, 5)) - 1);
        return detail::last_label(generated, max_label);
    }
    auto n = detail::last_number(generated);
    if (n && n->empty()) return std::nullopt;
    return n;
}

// Membership test behind the preference-pair case rule: does the answer
// commit to the target? Whole-token, case-insensitive, restricted to the
// final two lines of the answer so mentions inside the rationale do not
// count as a commitment.
inline std::string final_lines(std::string_view text, size_t count) {
    auto lines = split_lines(text);
    while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
    std::string out;
    const size_t start = lines.size() > count ? lines.size() - count : 0;
    for (size_t i = start; i < lines.size(); ++i) {
        if (i > start) out += '\n';
        out += lines[i];
    }
    return out;
}

inline bool target_in_answer(std::string_view answer, std::string_view target, TaskKind kind,
                             [[maybe_unused]] int n_choices = 5) {
    const std::string tail = final_lines(answer, 2);
    const std::string want = normalize_target(target, kind);
    if (want.empty()) return false;
    if (kind == TaskKind::multiple_choice) {
        // any standalone occurrence of the wanted label in the tail
        for (size_t pos = 0; pos < tail.size(); ++pos) {
            char c = tail[pos];
            if (c >= 'a' && c <= 'e') c = static_cast<char>(c - 'a' + 'A');
            if (c != want[0]) continue;
            const bool left_ok = pos == 0 || !is_word_char(tail[pos - 1]);
            const bool right_ok = pos + 1 >= tail.size() || !is_word_char(tail[pos + 1]);
            if (left_ok && right_ok) return true;
        }
        return false;
    }
    // numeric: any standalone number in the tail with equal value
    std::string_view view(tail);
    for (size_t pos = 0; pos < view.size(); ++pos) {
        if (!std::isdigit(static_cast<unsigned char>(view[pos]))) continue;
        size_t begin = pos;
        size_t end = pos;
        while (end < view.size() && std::isdigit(static_cast<unsigned char>(view[end]))) ++end;
        if (end < view.size() && view[end] == '.' && end + 1 < view.size() &&
            std::isdigit(static_cast<unsigned char>(view[end + 1]))) {
            ++end;
            while (end < view.size() && std::isdigit(static_cast<unsigned char>(view[end]))) ++end;
        }
        size_t sign = begin;
        if (sign > 0 && (view[sign - 1] == '-' || view[sign - 1] == '+')) --sign;
        const bool left_ok = sign == 0 || !is_word_char(view[sign - 1]);
        const bool right_ok = end >= view.size() || !is_word_char(view[end]);
        if (left_ok && right_ok) {
            if (auto n = normalize_number(view.substr(sign, end - sign)); n && *n == want)
                return true;
        }
        pos = end;
    }
    return false;
}

// A generation counts as a well-formed chain of thought when at least two
// non-empty rationale lines precede the line that commits to the final label.
inline bool has_well_formed_cot(std::string_view generated, TaskKind kind, int n_choices = 5) {
    const auto answer = extract_answer_text(generated, kind, n_choices);
    if (!answer) return false;
    auto lines = split_lines(generated);
    // find the last line containing the extracted answer as a standalone token
    size_t answer_line = lines.size();
    for (size_t i = lines.size(); i-- > 0;) {
        if (target_in_answer(lines[i], *answer, kind, n_choices)) {
            answer_line = i;
            break;
        }
    }
    if (answer_line == lines.size()) return false;
    size_t rationale = 0;
    for (size_t i = 0; i < answer_line; ++i)
        if (!trim(lines[i]).empty()) ++rationale;
    return rationale >= 2;
}

}  // namespace selfrefine
