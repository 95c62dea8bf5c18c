// Every heap block starts on a 64-byte boundary. Eigen's vectorized reductions
// over mapped std::vector buffers peel a different number of leading elements
// depending on the address, which changes the summation order; with a fixed
// alignment the same inputs always give the same bits.

#include <cstdlib>
#include <new>

namespace {

constexpr std::size_t kAlign = 64;

void* aligned_or_null(std::size_t n) noexcept {
    if (n == 0) {
        n = 1;
    }
    return std::aligned_alloc(kAlign, (n + kAlign - 1) / kAlign * kAlign);
}

void* aligned_or_throw(std::size_t n) {
    for (;;) {
        if (void* p = aligned_or_null(n)) {
            return p;
        }
        std::new_handler h = std::get_new_handler();
        if (!h) {
            throw std::bad_alloc();
        }
        h();
    }
}

}  // namespace

void* operator new(std::size_t n) { return aligned_or_throw(n); }
void* operator new[](std::size_t n) { return aligned_or_throw(n); }
void* operator new(std::size_t n, const std::nothrow_t&) noexcept { return aligned_or_null(n); }
void* operator new[](std::size_t n, const std::nothrow_t&) noexcept { return aligned_or_null(n); }
void operator delete(void* p) noexcept { std::free(p); }
void operator delete[](void* p) noexcept { std::free(p); }
void operator delete(void* p, std::size_t) noexcept { std::free(p); }
void operator delete[](void* p, std::size_t) noexcept { std::free(p); }
void operator delete(void* p, const std::nothrow_t&) noexcept { std::free(p); }
void operator delete[](void* p, const std::nothrow_t&) noexcept { std::free(p); }
